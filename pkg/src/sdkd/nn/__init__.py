from .complexity import attention_flops, attention_params, conv_flops, conv_params, count_flops, count_params
from .layers import (
    ChannelLayerNorm,
    ConvBlock,
    FuseBlock,
    SelfAttention,
    attention_block,
    channel_layer_norm,
    conv_block,
    gelu,
    latent_fuse,
    softmax_attention,
)
from .models import (
    KINDS,
    STUDENT_KINDS,
    TEACHER_KINDS,
    MLPMixer,
    ModelSpec,
    ResNet,
    SimVP,
    STAlterNet,
    UNet,
    alternation_groups,
    build_model,
    latent_channels,
)
from .params import ParameterSet, load_checkpoint, save_checkpoint
