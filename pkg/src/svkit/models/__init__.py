from .extract import (
    build_model,
    extract_chunk_embeddings,
    extract_embedding,
    load_model,
    save_model,
)
from .svector import SvectorConfig, SvectorNet, svector_forward
from .tdnn import TdnnConfig, TdnnNet, splice, tdnn_forward
from .transformer import (
    Encoder,
    EncoderLayer,
    MultiHeadSelfAttention,
    encoder_layer_forward,
    multihead_self_attention,
    sinusoidal_pe,
)
