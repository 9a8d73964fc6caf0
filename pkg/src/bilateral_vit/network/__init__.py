from .blocks import RSU, MFFBlock, PlainDecoderBlock, SIGBlock
from .model import (
    SIG_STRIDES,
    BilateralViT,
    FeaturePyramid,
    build_model,
    count_parameters,
    init_weights,
    load_model,
    read_checkpoint,
    save_checkpoint,
)


def encoder_forward(model, image):
    return model.encoder_forward(image)


def vessel_branch_forward(model, vessel_input):
    return model.vessel_branch_forward(vessel_input)


def decoder_forward(model, pyramid, sig=None):
    return model.decoder_forward(pyramid, sig)
