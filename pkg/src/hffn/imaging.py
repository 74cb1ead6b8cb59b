"""Image handling, bicubic resampling, and the quality metrics.

Images are planar float arrays (channels, H, W) in [0, 1]. PNG round-trips
through 8-bit (16-bit files load with full precision). Metrics follow the
standard super-resolution evaluation protocol: convert to the luma channel,
shave a border equal to the scale factor, then PSNR / SSIM.

Everything here is plain numpy; the network's tensor engine only appears in
the conversion helpers and the frequency-map probe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image as _PILImage

from . import tensor as T

__all__ = [
    "Image",
    "ImagePair",
    "ImageIOError",
    "load_png",
    "save_png",
    "rgb_to_y",
    "to_y",
    "as_rgb",
    "bicubic_resize",
    "psnr",
    "ssim",
    "to_tensor",
    "from_tensor",
    "make_pair",
    "decompose",
]

_COLORSPACES = ("RGB", "Y")


class ImageIOError(RuntimeError):
    """An image file could not be read or decoded."""


@dataclass(frozen=True)
class Image:
    """Planar image: float64 pixels (channels, H, W) clamped to [0, 1]."""

    pixels: np.ndarray
    colorspace: str = "RGB"

    def __post_init__(self):
        p = self.pixels
        if not isinstance(p, np.ndarray) or p.ndim != 3:
            raise ValueError("Image.pixels must be a (channels, H, W) array")
        if self.colorspace not in _COLORSPACES:
            raise ValueError(f"unknown colorspace {self.colorspace!r}")
        want = 3 if self.colorspace == "RGB" else 1
        if p.shape[0] != want:
            raise ValueError(
                f"{self.colorspace} images need {want} channels; got {p.shape[0]}"
            )
        if p.shape[1] < 1 or p.shape[2] < 1:
            raise ValueError(f"empty image: shape {p.shape}")
        if not np.isfinite(p).all():
            raise ValueError("image contains non-finite pixels")
        arr = np.clip(np.ascontiguousarray(p, dtype=np.float64), 0.0, 1.0)
        arr.setflags(write=False)
        object.__setattr__(self, "pixels", arr)

    @property
    def height(self):
        return self.pixels.shape[1]

    @property
    def width(self):
        return self.pixels.shape[2]


@dataclass(frozen=True)
class ImagePair:
    """A low-resolution image with its ground-truth high-resolution mate."""

    lr: Image
    hr: Image
    scale: int
    name: str = ""

    def __post_init__(self):
        if self.scale < 1:
            raise ValueError(f"scale must be >= 1; got {self.scale}")
        if (self.hr.height, self.hr.width) != (
            self.lr.height * self.scale,
            self.lr.width * self.scale,
        ):
            raise ValueError(
                f"pair {self.name or '<unnamed>'}: HR {self.hr.height}x{self.hr.width} "
                f"is not {self.scale}x the LR {self.lr.height}x{self.lr.width}"
            )


# ---------------------------------------------------------------------------
# PNG IO
# ---------------------------------------------------------------------------

def load_png(path):
    """Load a PNG as an RGB or Y image with pixels in [0, 1].

    8-bit channels divide by 255, 16-bit by 65535. Palette and RGBA inputs
    are converted to RGB (alpha dropped against white per PIL); grayscale
    stays single-channel.
    """
    try:
        with _PILImage.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("I;16", "I;16B", "I", "I;16L"):
                arr = np.asarray(im, dtype=np.float64) / 65535.0
                return Image(arr[None, :, :], "Y")
            if mode == "L":
                arr = np.asarray(im, dtype=np.float64) / 255.0
                return Image(arr[None, :, :], "Y")
            if mode != "RGB":
                im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except (OSError, SyntaxError, ValueError) as exc:
        raise ImageIOError(f"cannot read image {path}: {exc}") from exc
    return Image(arr.transpose(2, 0, 1), "RGB")


def save_png(image, path):
    """Write an image as 8-bit PNG (values quantized by round(x*255))."""
    arr = np.rint(image.pixels * 255.0).astype(np.uint8)
    if image.colorspace == "Y":
        pil = _PILImage.fromarray(arr[0], mode="L")
    else:
        pil = _PILImage.fromarray(arr.transpose(1, 2, 0), mode="RGB")
    pil.save(path, format="PNG")


# ---------------------------------------------------------------------------
# colorspace
# ---------------------------------------------------------------------------

def rgb_to_y(image):
    """ITU-R BT.601 luma (studio swing) of an RGB image, in [0, 1].

    y = (65.738 r + 129.057 g + 25.064 b) / 256 + 16 / 255 for r, g, b in
    [0, 1]; white maps to ~235/255 and black to 16/255.
    """
    if image.colorspace != "RGB":
        raise ValueError(f"rgb_to_y needs an RGB image; got {image.colorspace}")
    r, g, b = image.pixels
    y = (65.738 * r + 129.057 * g + 25.064 * b) / 256.0 + 16.0 / 255.0
    return Image(y[None, :, :], "Y")


def to_y(image):
    """The image itself if already luma, else its luma conversion."""
    return image if image.colorspace == "Y" else rgb_to_y(image)


# ---------------------------------------------------------------------------
# bicubic resampling
# ---------------------------------------------------------------------------

def _cubic_kernel(x):
    """Keys cubic (a = -0.5), support [-2, 2]."""
    ax = np.abs(x)
    ax2 = ax * ax
    ax3 = ax2 * ax
    inner = 1.5 * ax3 - 2.5 * ax2 + 1.0
    outer = -0.5 * ax3 + 2.5 * ax2 - 4.0 * ax + 2.0
    return np.where(ax <= 1.0, inner, np.where(ax < 2.0, outer, 0.0))


def _resize_axis_weights(n_in, n_out, factor):
    """Sample positions and normalized tap weights for one axis.

    Pixel centers map through u = (i + 0.5)/factor - 0.5. On downscale the
    kernel is stretched by 1/factor (antialias). Taps outside the image
    clamp to the border (edge replication); each row of weights is
    normalized to sum to one.
    """
    u = (np.arange(n_out, dtype=np.float64) + 0.5) / factor - 0.5
    kscale = min(factor, 1.0)
    half_width = 2.0 / kscale
    left = np.floor(u - half_width).astype(np.int64) + 1
    ntaps = int(math.ceil(2.0 * half_width)) + 2
    idx = left[:, None] + np.arange(ntaps)[None, :]
    w = _cubic_kernel((u[:, None] - idx) * kscale) * kscale
    w = w / w.sum(axis=1, keepdims=True)
    idx = np.clip(idx, 0, n_in - 1)
    return idx, w


def _axis_matrix(n_in, n_out, factor):
    idx, w = _resize_axis_weights(n_in, n_out, factor)
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    for tap in range(idx.shape[1]):
        np.add.at(mat, (np.arange(n_out), idx[:, tap]), w[:, tap])
    return mat


def bicubic_resize(image, factor):
    """Separable bicubic resize by ``factor`` (output size = round(size*factor)).

    Uses the Keys a=-0.5 kernel with antialias prefiltering on downscale and
    edge replication at the borders; factor 1 is an exact identity.
    """
    if factor <= 0:
        raise ValueError(f"resize factor must be positive; got {factor}")
    h_in, w_in = image.height, image.width
    h_out = int(round(h_in * factor))
    w_out = int(round(w_in * factor))
    if h_out < 1 or w_out < 1:
        raise ValueError(
            f"resize factor {factor} collapses a {h_in}x{w_in} image"
        )
    mh = _axis_matrix(h_in, h_out, factor)
    mw = _axis_matrix(w_in, w_out, factor)
    out = np.einsum("oh,chw,pw->cop", mh, image.pixels, mw, optimize=True)
    return Image(out, image.colorspace)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _shaved_luma_pair(a, b, shave):
    if (a.height, a.width) != (b.height, b.width):
        raise ValueError(
            f"metric inputs differ in size: {a.height}x{a.width} vs {b.height}x{b.width}"
        )
    ya, yb = to_y(a).pixels[0], to_y(b).pixels[0]
    if shave < 0:
        raise ValueError(f"shave must be >= 0; got {shave}")
    if shave:
        if 2 * shave >= min(ya.shape):
            raise ValueError(
                f"shave {shave} leaves no pixels of a {ya.shape[0]}x{ya.shape[1]} image"
            )
        ya = ya[shave:-shave, shave:-shave]
        yb = yb[shave:-shave, shave:-shave]
    return ya, yb


def psnr(a, b, shave=0):
    """Peak signal-to-noise ratio on the luma channel, in dB.

    Pixels live in [0, 1] so the peak is 1; identical inputs give +inf.
    ``shave`` crops that many border pixels on every side first (the
    convention is shave == scale).
    """
    ya, yb = _shaved_luma_pair(a, b, shave)
    mse = float(np.mean(np.square(ya - yb)))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03


def _gaussian_taps(size=_SSIM_WINDOW, sigma=_SSIM_SIGMA):
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _windowed_mean(img, taps):
    t = sliding_window_view(img, len(taps), axis=0)
    t = np.tensordot(t, taps, axes=([2], [0]))
    t = sliding_window_view(t, len(taps), axis=1)
    return np.tensordot(t, taps, axes=([2], [0]))


def ssim(a, b, shave=0):
    """Mean structural similarity on the luma channel.

    11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03, dynamic range 1,
    population (uncentered-n) covariance, averaged over valid windows only.
    """
    ya, yb = _shaved_luma_pair(a, b, shave)
    if min(ya.shape) < _SSIM_WINDOW:
        raise ValueError(
            f"ssim needs at least {_SSIM_WINDOW}x{_SSIM_WINDOW} pixels after "
            f"shaving; got {ya.shape[0]}x{ya.shape[1]}"
        )
    taps = _gaussian_taps()
    mu_a = _windowed_mean(ya, taps)
    mu_b = _windowed_mean(yb, taps)
    var_a = _windowed_mean(ya * ya, taps) - mu_a * mu_a
    var_b = _windowed_mean(yb * yb, taps) - mu_b * mu_b
    cov = _windowed_mean(ya * yb, taps) - mu_a * mu_b
    c1 = _SSIM_K1 * _SSIM_K1
    c2 = _SSIM_K2 * _SSIM_K2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# tensor bridging and dataset helpers
# ---------------------------------------------------------------------------

def to_tensor(image, dtype=np.float64):
    """Image -> (1, C, H, W) tensor."""
    return T.Tensor(image.pixels[None].astype(dtype))


def from_tensor(t, colorspace="RGB"):
    """(1, C, H, W) tensor -> Image (values clamped to [0, 1])."""
    if t.batch != 1:
        raise ValueError(f"from_tensor needs batch 1; got {t.batch}")
    return Image(np.asarray(t.data[0], dtype=np.float64), colorspace)


def as_rgb(image):
    """RGB view of an image, replicating luma to three channels if needed."""
    if image.colorspace == "RGB":
        return image
    return Image(np.repeat(image.pixels, 3, axis=0), "RGB")


def make_pair(hr, scale, name=""):
    """Crop HR to a multiple of ``scale`` and synthesize the bicubic LR mate."""
    if scale < 1:
        raise ValueError(f"scale must be >= 1; got {scale}")
    h = (hr.height // scale) * scale
    w = (hr.width // scale) * scale
    if h < scale or w < scale:
        raise ValueError(
            f"image {name or '<unnamed>'} ({hr.height}x{hr.width}) too small for scale {scale}"
        )
    cropped = Image(hr.pixels[:, :h, :w], hr.colorspace)
    if scale == 1:
        return ImagePair(lr=cropped, hr=cropped, scale=1, name=name)
    lr = bicubic_resize(cropped, 1.0 / scale)
    return ImagePair(lr=lr, hr=cropped, scale=scale, name=name)


def decompose(image, model, block_index):
    """Frequency maps seen by one block: (smooth, detail) as luma images.

    Runs the model on ``image``, captures the probed block's smoothed copy
    and high-frequency residue, reduces each over channels by mean absolute
    value, and min-max normalizes to [0, 1] (an all-constant map comes back
    as zeros). Map sizes match the block's working resolution, cropped to
    the un-padded geometry when the input was odd-sized.
    """
    rgb = as_rgb(image)
    x = to_tensor(rgb, dtype=model.dtype)
    _, record = model.forward(x, probe_index=block_index)
    maps = []
    for key in ("low", "high"):
        feat = record[key].data[0]
        amp = np.abs(feat).mean(axis=0)
        # the trunk ran on the even-padded input; crop back to the caller's size
        amp = amp[: image.height, : image.width]
        lo, hi = float(amp.min()), float(amp.max())
        if hi - lo < 1e-12:
            amp = np.zeros_like(amp)
        else:
            amp = (amp - lo) / (hi - lo)
        maps.append(Image(amp[None], "Y"))
    return maps[0], maps[1]
