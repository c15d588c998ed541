"""
Steganographic key codec.

The encoder hides a binary message plane in a cover image, the decoder
recovers it, and a critic scores how natural an image looks. The encoder is
what authorized users receive; the decoder stays with the model owner and is
used to trace keys out of intercepted images.
"""

import copy
import logging
import math
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from skimage.metrics import peak_signal_noise_ratio, structural_similarity
from torch import nn
from torch.utils.data import DataLoader, Dataset, TensorDataset
from tqdm import tqdm

from backend.checkpoints import load_checkpoint, save_checkpoint
from backend.metrics import MetricsLog, as_log, summarize_row
from exceptions import InvalidArgumentError, TrainingFailureError
from keys import ExpandedKey, UserKey, expand_key, extract_key, hamming_distance
from schemas import CodecConfig, IqaReport, MeanStd
from utils import loader_workers, resolve_device, seed_everything

logger = logging.getLogger(__name__)


def _block(in_channels: int, out_channels: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, 3, padding=1),
        nn.LeakyReLU(inplace=True),
        nn.BatchNorm2d(out_channels),
    )


class DenseEncoder(nn.Module):
    """
    Densely connected encoder with a residual connection to the cover.

    Input: (N, 3, H, W), (N, D, H, W)
    Output: (N, 3, H, W)

    With data_depth=0 the message port disappears and the network becomes a
    plain image-to-image generator of the same shape.
    """

    def __init__(self, data_depth: int, hidden_size: int):
        super().__init__()
        self.data_depth = data_depth
        self.hidden_size = hidden_size

        self.conv1 = _block(3, hidden_size)
        self.conv2 = _block(hidden_size + data_depth, hidden_size)
        self.conv3 = _block(hidden_size * 2 + data_depth, hidden_size)
        self.conv4 = nn.Conv2d(hidden_size * 3 + data_depth, 3, 3, padding=1)

    def forward(self, image: torch.Tensor, data: Optional[torch.Tensor] = None) -> torch.Tensor:
        extra = [data] if self.data_depth else []
        x1 = self.conv1(image)
        x2 = self.conv2(torch.cat([x1, *extra], dim=1))
        x3 = self.conv3(torch.cat([x1, x2, *extra], dim=1))
        x4 = self.conv4(torch.cat([x1, x2, x3, *extra], dim=1))
        return image + x4


class DenseDecoder(nn.Module):
    """
    Input: (N, 3, H, W)
    Output: (N, D, H, W) message logits
    """

    def __init__(self, data_depth: int, hidden_size: int):
        super().__init__()
        self.data_depth = data_depth
        self.hidden_size = hidden_size

        self.conv1 = _block(3, hidden_size)
        self.conv2 = _block(hidden_size, hidden_size)
        self.conv3 = _block(hidden_size * 2, hidden_size)
        self.conv4 = nn.Conv2d(hidden_size * 3, data_depth, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x1 = self.conv1(x)
        x2 = self.conv2(x1)
        x3 = self.conv3(torch.cat([x1, x2], dim=1))
        return self.conv4(torch.cat([x1, x2, x3], dim=1))


class Critic(nn.Module):
    """Input: (N, 3, H, W); output: (N,) realness score."""

    def __init__(self, hidden_size: int):
        super().__init__()
        self.layers = nn.Sequential(
            _block(3, hidden_size),
            _block(hidden_size, hidden_size),
            nn.Conv2d(hidden_size, 1, 3, padding=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.layers(x).mean(dim=(1, 2, 3))


class StegoCodec(nn.Module):
    """Encoder/decoder/critic bundle for one image geometry and key shape."""

    def __init__(self, image_size: int, key_channels: int, r: int, hidden_size: int = 32):
        super().__init__()
        if image_size % r:
            raise InvalidArgumentError(f"Image size {image_size} is not a multiple of r={r}.")
        self.image_size = image_size
        self.key_channels = key_channels
        self.r = r
        self.hidden_size = hidden_size
        self.encoder = DenseEncoder(key_channels, hidden_size)
        self.decoder = DenseDecoder(key_channels, hidden_size)
        self.critic = Critic(hidden_size)

    @property
    def geometry(self) -> Tuple[int, int, int]:
        return (3, self.image_size, self.image_size)

    @property
    def device(self) -> torch.device:
        return next(self.parameters()).device

    def _check_images(self, images: torch.Tensor) -> torch.Tensor:
        if images.ndim == 3:
            images = images.unsqueeze(0)
        if images.ndim != 4 or tuple(images.shape[1:]) != self.geometry:
            raise InvalidArgumentError(
                f"Expected images of shape {self.geometry}, got {tuple(images.shape[-3:])}."
            )
        return images

    def message(self, key: ExpandedKey | UserKey | torch.Tensor, batch: int) -> torch.Tensor:
        """Message tensor (batch, c, h, w) for a key, an expanded key or a raw plane."""
        if isinstance(key, UserKey):
            key = expand_key(key, self.image_size, self.image_size)
        if isinstance(key, ExpandedKey):
            plane = torch.from_numpy(key.bits.astype(np.float32))
        else:
            plane = key.float()
        if plane.ndim == 3:
            plane = plane.unsqueeze(0).expand(batch, -1, -1, -1)
        expected = (self.key_channels, self.image_size, self.image_size)
        if tuple(plane.shape[1:]) != expected or plane.shape[0] != batch:
            raise InvalidArgumentError(
                f"Message plane must be {expected} per image, got {tuple(plane.shape)}."
            )
        return plane.to(self.device)

    def encode_raw(self, images: torch.Tensor, message: torch.Tensor) -> torch.Tensor:
        return self.encoder(images, message).clamp(0.0, 1.0)

    def encode(self, images: torch.Tensor, key: ExpandedKey | UserKey | torch.Tensor) -> torch.Tensor:
        """
        Embed a key into one image (3×h×w) or a batch; output stays in [0, 1]
        and has the input's shape.
        """
        single = images.ndim == 3
        images = self._check_images(images).to(self.device)
        out = self.encode_raw(images, self.message(key, images.shape[0]))
        return out[0] if single else out

    def decode_logits(self, stego: torch.Tensor) -> torch.Tensor:
        return self.decoder(self._check_images(stego).to(self.device))

    def decode(self, stego: torch.Tensor) -> torch.Tensor:
        """Real-valued message plane in [0, 1], same leading shape as the input."""
        single = stego.ndim == 3
        out = torch.sigmoid(self.decode_logits(stego))
        return out[0] if single else out

    @torch.no_grad()
    def extract_keys(self, stego: torch.Tensor, threshold: float = 0.5) -> List[UserKey]:
        planes = self.decode(self._check_images(stego)).cpu().numpy()
        return [extract_key(p, self.r, threshold) for p in planes]

    # ---- persistence ----

    def save(self, path: str | Path, metadata: Optional[Dict[str, Any]] = None) -> Path:
        meta = {
            "image_size": self.image_size,
            "key_channels": self.key_channels,
            "r": self.r,
            "hidden_size": self.hidden_size,
        }
        meta.update(metadata or {})
        return save_checkpoint(path, "codec", self.state_dict(), meta)

    @classmethod
    def load(cls, path: str | Path, device: Optional[torch.device] = None) -> "StegoCodec":
        state, meta = load_checkpoint(path, "codec")
        codec = cls(meta["image_size"], meta["key_channels"], meta["r"], meta["hidden_size"])
        codec.load_state_dict(state)
        codec.metadata = meta
        return codec.to(device or torch.device("cpu")).eval()


def similarity_loss(cover: torch.Tensor, stego: torch.Tensor) -> torch.Tensor:
    return F.mse_loss(stego, cover)


def _as_dataset(images: Dataset | torch.Tensor) -> Dataset:
    if torch.is_tensor(images):
        return TensorDataset(images)
    return images


def _random_message(batch: int, codec: StegoCodec, generator: torch.Generator) -> torch.Tensor:
    shape = (batch, codec.key_channels, codec.image_size, codec.image_size)
    return torch.randint(0, 2, shape, generator=generator).float()


def train_codec(
    train_images: Dataset | torch.Tensor,
    image_size: int,
    key_channels: int,
    r: int,
    cfg: CodecConfig,
    seed: int = 0,
    log: Optional[MetricsLog] = None,
    device: Optional[torch.device] = None,
) -> StegoCodec:
    """
    Adversarially train a codec on random binary messages.

    Each step draws a fresh message per image. The codec minimizes
    decoding BCE + cover/stego MSE + weighted critic score; the critic,
    with clipped weights, maximizes its score gap between stego and cover.

    :param train_images: Dataset whose items start with an image, or an image tensor.
    :return: The trained codec in eval mode.
    """
    dataset = _as_dataset(train_images)
    if len(dataset) == 0:
        raise InvalidArgumentError("Codec training needs at least one image.")
    device = device or resolve_device()
    log = as_log(log)
    generator = seed_everything(seed)

    codec = StegoCodec(image_size, key_channels, r, cfg.hidden_size).to(device)
    coder_params = list(codec.encoder.parameters()) + list(codec.decoder.parameters())
    opt = torch.optim.Adam(coder_params, lr=cfg.lr)
    opt_critic = torch.optim.Adam(codec.critic.parameters(), lr=cfg.critic_lr)
    loader = DataLoader(
        dataset,
        batch_size=cfg.batch_size,
        shuffle=True,
        generator=torch.Generator().manual_seed(seed),
        num_workers=loader_workers(),
    )
    last_stable = copy.deepcopy(codec.state_dict())

    for epoch in range(1, cfg.epochs + 1):
        codec.train()
        totals = {"decoding": 0.0, "similarity": 0.0, "realness": 0.0, "critic": 0.0, "bit_acc": 0.0}
        batches = 0
        for batch in tqdm(loader, desc=f"codec {epoch}", leave=False, disable=not sys.stderr.isatty()):
            cover = batch[0].to(device)
            msg = _random_message(cover.shape[0], codec, generator).to(device)

            for _ in range(cfg.critic_steps):
                with torch.no_grad():
                    stego = codec.encode_raw(cover, msg)
                critic_loss = codec.critic(cover).mean() - codec.critic(stego).mean()
                opt_critic.zero_grad()
                critic_loss.backward()
                opt_critic.step()
                for p in codec.critic.parameters():
                    p.data.clamp_(-cfg.critic_clip, cfg.critic_clip)

            stego = codec.encode_raw(cover, msg)
            logits = codec.decoder(stego)
            l_d = F.binary_cross_entropy_with_logits(logits, msg)
            l_s = similarity_loss(cover, stego)
            l_r = codec.critic(stego).mean()
            loss = cfg.decoding_weight * l_d + cfg.similarity_weight * l_s + cfg.realness_weight * l_r
            if not torch.isfinite(loss):
                raise TrainingFailureError(
                    f"Codec loss became {loss.item()} in epoch {epoch}.", last_stable=last_stable
                )
            opt.zero_grad()
            loss.backward()
            opt.step()

            totals["decoding"] += l_d.item()
            totals["similarity"] += l_s.item()
            totals["realness"] += l_r.item()
            totals["critic"] += critic_loss.item()
            totals["bit_acc"] += ((logits > 0).float() == msg).float().mean().item()
            batches += 1

        row = {"epoch": epoch, **{k: v / max(batches, 1) for k, v in totals.items()}}
        log.append(**row)
        logger.info("codec %s", summarize_row(row))
        last_stable = copy.deepcopy(codec.state_dict())

    return codec.eval()


@torch.no_grad()
def bit_accuracy(codec: StegoCodec, images: torch.Tensor, seed: int = 0, batch_size: int = 64) -> float:
    """Per-bit decode accuracy of random messages embedded in `images`."""
    generator = torch.Generator().manual_seed(seed)
    codec.eval()
    correct, total = 0.0, 0
    for start in range(0, images.shape[0], batch_size):
        cover = images[start : start + batch_size].to(codec.device)
        msg = _random_message(cover.shape[0], codec, generator).to(codec.device)
        decoded = codec.decode(codec.encode_raw(cover, msg))
        correct += ((decoded > 0.5).float() == msg).float().sum().item()
        total += msg.numel()
    return correct / max(total, 1)


@torch.no_grad()
def encode_batched(codec: StegoCodec, images: torch.Tensor, key: UserKey, batch_size: int = 128) -> torch.Tensor:
    codec.eval()
    out = [
        codec.encode(images[i : i + batch_size], key).cpu()
        for i in range(0, images.shape[0], batch_size)
    ]
    return torch.cat(out) if out else images.clone()


def _ssim_window(h: int, w: int) -> int:
    win = min(7, h, w)
    return win if win % 2 else win - 1


def iqa(cover: torch.Tensor | np.ndarray, stego: torch.Tensor | np.ndarray) -> IqaReport:
    """
    SSIM and PSNR (max value 1.0) per pair, aggregated as mean ± std.

    Identical pairs score PSNR = +inf; the PSNR mean is +inf whenever any pair
    is identical and the std is taken over the finite values.
    """
    if torch.is_tensor(cover):
        cover = cover.detach().cpu().numpy()
    if torch.is_tensor(stego):
        stego = stego.detach().cpu().numpy()
    if len(cover) != len(stego):
        raise InvalidArgumentError(f"Batch lengths differ: {len(cover)} vs {len(stego)}.")
    if len(cover) == 0:
        raise InvalidArgumentError("IQA needs at least one image pair.")

    ssims, psnrs = [], []
    for a, b in zip(cover.astype(np.float64), stego.astype(np.float64)):
        win = _ssim_window(a.shape[-2], a.shape[-1])
        ssims.append(structural_similarity(a, b, data_range=1.0, channel_axis=0, win_size=win))
        if np.array_equal(a, b):
            psnrs.append(math.inf)
        else:
            psnrs.append(peak_signal_noise_ratio(a, b, data_range=1.0))

    psnr_arr = np.asarray(psnrs)
    finite = psnr_arr[np.isfinite(psnr_arr)]
    psnr_mean = math.inf if finite.size < psnr_arr.size else float(finite.mean())
    return IqaReport(
        ssim=MeanStd(mean=float(np.mean(ssims)), std=float(np.std(ssims))),
        psnr=MeanStd(mean=psnr_mean, std=float(finite.std()) if finite.size else 0.0),
        count=len(ssims),
    )


@torch.no_grad()
def residual_transplant_rate(
    codec: StegoCodec, covers: torch.Tensor, key: UserKey, eps3: int = 1
) -> float:
    """
    Fraction of trials in which the residual of one encoded image, added to a
    different cover, does NOT carry the key (HD > eps3). High values mean the
    perturbation is sample-specific.
    """
    if covers.shape[0] < 2:
        raise InvalidArgumentError("Residual transplant needs at least two covers.")
    covers = covers.to(codec.device)
    stego = encode_batched(codec, covers, key).to(codec.device)
    residual = stego - covers
    transplanted = (covers.roll(-1, dims=0) + residual).clamp(0.0, 1.0)
    extracted = codec.extract_keys(transplanted)
    failures = sum(hamming_distance(k, key) > eps3 for k in extracted)
    return failures / len(extracted)
