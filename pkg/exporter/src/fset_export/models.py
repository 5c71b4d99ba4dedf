"""Feature extractors for the supported pretrained image-model families.

Each model exports its standard pooled embedding, the activation right
before the classification head. The registry pins the expected feature
width; a model producing anything else is a hard error, never a silent
reshape.
"""

from __future__ import annotations

from .format import ExportError

# torchvision-constructible members of the tested families
FEATURE_DIMS = {
    "resnet18": 512,
    "resnet34": 512,
    "resnet50": 2048,
    "resnet101": 2048,
    "resnet152": 2048,
    "efficientnet_b0": 1280,
    "efficientnet_b1": 1280,
    "efficientnet_b2": 1408,
    "efficientnet_b3": 1536,
    "efficientnet_b4": 1792,
    "efficientnet_b5": 2048,
    "efficientnet_b6": 2304,
    "efficientnet_b7": 2560,
    "densenet121": 1024,
    "densenet161": 2208,
    "vit_b_16": 768,
    "vit_b_32": 768,
    "vit_l_16": 1024,
    "vit_l_32": 1024,
}

_FEATURE_LAYER = {
    "resnet": "global average pool before fc",
    "efficientnet": "global average pool before classifier",
    "densenet": "relu + global average pool before classifier",
    "vit": "class-token representation before heads",
}


def feature_dim(model_name: str) -> int:
    try:
        return FEATURE_DIMS[model_name]
    except KeyError:
        known = ", ".join(sorted(FEATURE_DIMS))
        raise ExportError(f"unknown model {model_name!r}; supported: {known}") from None


def _family(model_name: str) -> str:
    for family in _FEATURE_LAYER:
        if model_name.startswith(family):
            return family
    raise ExportError(f"no family rule for model {model_name!r}")


def build_extractor(model_name: str, weights: str = "pretrained", device: str = "cpu"):
    """(module in eval mode, preprocessing transform, manifest metadata).

    weights is either "pretrained" (the family's published checkpoint and
    its eval transform) or "random:<seed>" (seeded initialization and the
    standard imagenet eval transform), the offline-deterministic mode.
    """
    import torch
    from torchvision import models as tv_models
    from torchvision import transforms

    dim = feature_dim(model_name)
    family = _family(model_name)

    if weights == "pretrained":
        enum = tv_models.get_model_weights(model_name).DEFAULT
        model = tv_models.get_model(model_name, weights=enum)
        transform = enum.transforms()
        weights_version = str(enum)
        preprocessing = repr(transform).replace("\n", " ")
    elif weights.startswith("random:"):
        try:
            seed = int(weights.split(":", 1)[1])
        except ValueError:
            raise ExportError(f"bad weights descriptor {weights!r}") from None
        torch.manual_seed(seed)
        model = tv_models.get_model(model_name, weights=None)
        transform = transforms.Compose(
            [
                transforms.Resize(256),
                transforms.CenterCrop(224),
                transforms.ToTensor(),
                transforms.Normalize(
                    mean=[0.485, 0.456, 0.406], std=[0.229, 0.224, 0.225]
                ),
            ]
        )
        weights_version = weights
        preprocessing = "resize 256, center crop 224, imagenet mean/std"
    else:
        raise ExportError(
            f"weights must be 'pretrained' or 'random:<seed>', got {weights!r}"
        )

    if family == "resnet":
        model.fc = torch.nn.Identity()
    elif family in ("efficientnet", "densenet"):
        model.classifier = torch.nn.Identity()
    else:  # vit
        model.heads = torch.nn.Identity()

    model.eval()
    model.to(torch.device(device))
    meta = {
        "model": model_name,
        "weights": weights_version,
        "preprocessing": preprocessing,
        "feature_layer": _FEATURE_LAYER[family],
        "feature_dim": dim,
        "torch_version": torch.__version__,
        "torchvision_version": __import__("torchvision").__version__,
    }
    return model, transform, meta
