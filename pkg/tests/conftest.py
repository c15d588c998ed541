import numpy as np
import pytest
import torch

from domains import ImageSet, build_domains, synthetic_dataset
from experts import TappedClassifier
from keys import KeyRegistry, UserKey
from schemas import parse_config
from stegonet import StegoCodec

IMAGE_SIZE = 8
R = 4
NUM_CLASSES = 4
WIDTHS = (4, 4, 8, 8)


class PerfectCodec(StegoCodec):
    """
    Deterministic stand-in for a trained codec: the message is written into
    channel 0 and read back exactly; channels 1 and 2 keep the cover.
    """

    def __init__(self, image_size: int = IMAGE_SIZE, r: int = R):
        super().__init__(image_size, 1, r, hidden_size=4)

    def encode_raw(self, images, message):
        out = images.clone()
        out[:, :1] = 0.25 + 0.5 * message
        return out

    def decode_logits(self, stego):
        stego = self._check_images(stego).to(self.device)
        return (stego[:, :1] - 0.5) * 50.0


def make_key(pattern, user_id: str = "") -> UserKey:
    return UserKey(np.asarray(pattern, dtype=np.uint8).reshape(1, R, R), user_id)


@pytest.fixture
def images() -> ImageSet:
    return synthetic_dataset(24, NUM_CLASSES, IMAGE_SIZE, seed=3)


@pytest.fixture
def codec() -> PerfectCodec:
    return PerfectCodec().eval()


@pytest.fixture
def keys():
    """Three keys at pairwise Hamming distance ≥ 8."""
    return {
        "alice": make_key([0] * 16, "alice"),
        "bob": make_key([1] * 16, "bob"),
        "carol": make_key([0, 1] * 8, "carol"),
    }


@pytest.fixture
def registry(keys) -> KeyRegistry:
    reg = KeyRegistry(config_hash="h0")
    for user_id, key in keys.items():
        reg.register(user_id, key)
    return reg


@pytest.fixture
def triple(images, keys, codec):
    return build_domains(images, keys["alice"], codec, rng_seed=5)


@pytest.fixture
def classifier() -> TappedClassifier:
    torch.manual_seed(0)
    return TappedClassifier(NUM_CLASSES, WIDTHS).eval()


@pytest.fixture
def tiny_config():
    return parse_config(
        {
            "name": "tiny",
            "users": ["alice", "bob"],
            "dataset": {"train_size": 64, "test_size": 32, "image_size": IMAGE_SIZE, "num_classes": NUM_CLASSES},
            "key": {"r": R, "c": 1},
            "codec": {"hidden_size": 8, "epochs": 1, "batch_size": 16},
            "classifier": {"widths": list(WIDTHS), "epochs": 1, "batch_size": 16},
            "experts": {"real_epochs": 1, "fake_iterations": 2, "batch_size": 8, "estimator_steps": 1},
            "distill": {"epochs": 1, "batch_size": 16, "embed_dim": 8, "simple_ablation": True},
            "verify": {"query_size": 16, "workers": 2},
            "attacks": {"epochs": 1, "fractions": [0.25], "wp_amounts": [0.0, 0.5], "fp_step": 0.5, "generator_steps": 2},
        }
    )


class LabelOracle:
    """
    Endpoint double: recovers each query's label by matching channels 1-2
    (untouched by PerfectCodec) and answers correctly only when `accepts`
    says so for the image; otherwise it answers a wrong label.
    """

    def __init__(self, queries: ImageSet, accepts, name: str = "oracle"):
        self.queries = queries
        self.accepts = accepts
        self.name = name

    def predict(self, batch: torch.Tensor) -> torch.Tensor:
        labels = []
        for image in batch:
            match = (self.queries.images[:, 1:] == image[1:]).flatten(1).all(dim=1).nonzero()
            truth = int(self.queries.labels[match[0, 0]])
            labels.append(truth if self.accepts(image) else (truth + 1) % NUM_CLASSES)
        return torch.tensor(labels)
