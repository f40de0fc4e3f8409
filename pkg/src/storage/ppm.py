"""
ControlSR Image I/O
ImageBuffer carrier and binary PPM (P6, maxval 255) reading/writing.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Union

import numpy as np
import torch

from src.errors import ControlSRError, ParseError, ValidationError

logger = logging.getLogger(__name__)


@dataclass
class ImageBuffer:
    """RGB image, float64 values in [0,1], shape (height, width, 3)"""
    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValidationError(f"image must be (H, W, 3), got {self.pixels.shape}")
        if self.pixels.shape[0] < 1 or self.pixels.shape[1] < 1:
            raise ValidationError("image must be at least 1x1")
        if not np.all(np.isfinite(self.pixels)):
            raise ValidationError("image contains non-finite values")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ValidationError(
                f"image values outside [0,1]: [{self.pixels.min():.4f}, {self.pixels.max():.4f}]")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @classmethod
    def clipped(cls, pixels: np.ndarray) -> "ImageBuffer":
        return cls(np.clip(pixels, 0.0, 1.0))

    def to_tensor(self, dtype: torch.dtype = torch.float32) -> torch.Tensor:
        """(1, 3, H, W) tensor"""
        return torch.from_numpy(np.ascontiguousarray(self.pixels.transpose(2, 0, 1))).to(dtype).unsqueeze(0)

    @classmethod
    def from_tensor(cls, tensor: torch.Tensor) -> "ImageBuffer":
        """Build from a (3, H, W) or (1, 3, H, W) tensor, clamping to [0,1]"""
        if tensor.dim() == 4:
            if tensor.shape[0] != 1:
                raise ValidationError(f"expected a single image, got batch of {tensor.shape[0]}")
            tensor = tensor[0]
        array = tensor.detach().to(torch.float64).cpu().numpy().transpose(1, 2, 0)
        return cls.clipped(array)


def images_to_batch(images: List[ImageBuffer], dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Stack equally sized images into a (B, 3, H, W) tensor"""
    shapes = {im.pixels.shape for im in images}
    if len(shapes) != 1:
        raise ValidationError(f"images in a batch must share a shape, got {sorted(shapes)}")
    return torch.cat([im.to_tensor(dtype) for im in images], dim=0)


def _header_tokens(buf: bytes, path: str):
    """Yield (token, end_offset) for the 4 PPM header fields, skipping comments"""
    pos = 0
    tokens = []
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ParseError("truncated PPM header", offset=pos, path=path)
        tokens.append((buf[start:pos], start))
    # exactly one whitespace byte separates maxval from the raster
    return tokens, pos + 1


def decode_ppm(buf: bytes, path: str = "<bytes>") -> ImageBuffer:
    tokens, data_start = _header_tokens(buf, path)
    magic, _ = tokens[0]
    if magic != b"P6":
        raise ParseError(f"not a binary PPM (magic {magic!r}, expected b'P6')", offset=0, path=path)
    fields = []
    for token, offset in tokens[1:]:
        if not token.isdigit():
            raise ParseError(f"bad header field {token!r}", offset=offset, path=path)
        fields.append(int(token))
    width, height, maxval = fields
    if maxval != 255:
        raise ParseError(f"unsupported maxval {maxval}, only 255 is accepted", offset=tokens[3][1], path=path)
    if width < 1 or height < 1:
        raise ParseError(f"invalid size {width}x{height}", offset=tokens[1][1], path=path)
    expected = width * height * 3
    raster = buf[data_start:data_start + expected]
    if len(raster) != expected:
        raise ParseError(f"truncated raster: need {expected} bytes, got {len(raster)}",
                         offset=data_start, path=path)
    values = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3)
    return ImageBuffer(values.astype(np.float64) / 255.0)


def encode_ppm(image: ImageBuffer) -> bytes:
    quantized = np.clip(np.floor(image.pixels * 255.0 + 0.5), 0, 255).astype(np.uint8)
    header = f"P6\n{image.width} {image.height}\n255\n".encode("ascii")
    return header + quantized.tobytes(order="C")


def read_ppm(path: Union[str, Path]) -> ImageBuffer:
    """Read a P6 PPM; values mapped v/255"""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise ControlSRError(f"failed to read image {path}: {e}") from e
    return decode_ppm(buf, str(path))


def write_ppm(path: Union[str, Path], image: ImageBuffer) -> None:
    """Write a P6 PPM; values stored as round(v*255)"""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_ppm(image))
    except OSError as e:
        raise ControlSRError(f"failed to write image {path}: {e}") from e
    logger.debug(f"Wrote {image.width}x{image.height} image to {path}")
