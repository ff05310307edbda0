"""Motion-transformation generator.

Region heatmaps are estimated on source and driving images, each region's
first and second moments give an affine map between the two frames, and a
dense-motion network blends the per-region (plus background) backward flows
with pixelwise confidences.  Source features are warped with the composite
flow and decoded into the straightened image.

Coordinates are normalised to [-1, 1] with ``align_corners=False`` semantics
(pixel ``i`` of ``n`` sits at ``(2i + 1) / n - 1``), so grids of different
resolution share one coordinate frame.  Points are stored as (x, y).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

COV_EPS = 1e-4
PRIOR_FLOOR = 1e-4  # intensity floor of the log-intensity region prior


def coordinate_grid(h: int, w: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """(h, w, 2) grid of pixel-centre coordinates in (x, y) order."""
    x = (2 * torch.arange(w, dtype=dtype, device=device) + 1) / w - 1
    y = (2 * torch.arange(h, dtype=dtype, device=device) + 1) / h - 1
    yy, xx = torch.meshgrid(y, x, indexing="ij")
    return torch.stack([xx, yy], dim=-1)


def pixel_flow_to_grid(flow_px) -> torch.Tensor:
    """Convert an (H, W, 2) or (B, H, W, 2) pixel displacement (dx, dy) into an
    absolute normalised sampling grid."""
    flow = torch.as_tensor(np.asarray(flow_px) if not torch.is_tensor(flow_px) else flow_px)
    if flow.dim() == 3:
        flow = flow.unsqueeze(0)
    h, w = flow.shape[1:3]
    scale = torch.tensor([2.0 / w, 2.0 / h], dtype=flow.dtype)
    return coordinate_grid(h, w, dtype=flow.dtype).unsqueeze(0) + flow * scale


def identity_flow(batch: int, h: int, w: int, dtype=torch.float32) -> torch.Tensor:
    return coordinate_grid(h, w, dtype=dtype).unsqueeze(0).expand(batch, h, w, 2).contiguous()


def warp(grid: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Bilinearly sample ``grid`` (B, C, H, W) at the normalised coordinates in
    ``flow`` (B, H', W', 2); samples outside the image read 0."""
    if flow.shape[0] != grid.shape[0]:
        flow = flow.expand(grid.shape[0], *flow.shape[1:])
    return F.grid_sample(grid, flow.to(grid.dtype), mode="bilinear", padding_mode="zeros",
                         align_corners=False)


def warp_image(image: np.ndarray, flow_px: np.ndarray) -> np.ndarray:
    """Numpy convenience wrapper: warp a 2-D image by a pixel displacement field."""
    img = torch.as_tensor(np.asarray(image, dtype=np.float64))[None, None]
    out = warp(img, pixel_flow_to_grid(np.asarray(flow_px, dtype=np.float64)))
    return out[0, 0].numpy()


# ---------------------------------------------------------------------------
# 2x2 matrix helpers (closed forms keep gradients finite for repeated eigenvalues)


def det2(m: torch.Tensor) -> torch.Tensor:
    return m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]


def inv2(m: torch.Tensor) -> torch.Tensor:
    d = det2(m)
    adj = torch.stack([torch.stack([m[..., 1, 1], -m[..., 0, 1]], -1),
                       torch.stack([-m[..., 1, 0], m[..., 0, 0]], -1)], -2)
    return adj / d[..., None, None]


def sqrtm2(m: torch.Tensor) -> torch.Tensor:
    """Principal square root of symmetric positive-definite 2x2 matrices."""
    s = torch.sqrt(det2(m))
    t = torch.sqrt(m[..., 0, 0] + m[..., 1, 1] + 2 * s)
    eye = torch.eye(2, dtype=m.dtype, device=m.device)
    return (m + s[..., None, None] * eye) / t[..., None, None]


# ---------------------------------------------------------------------------
# building blocks


class _ConvAct(nn.Sequential):
    def __init__(self, cin, cout, k=3, stride=1):
        super().__init__(nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2), nn.LeakyReLU(0.2))


class Hourglass(nn.Module):
    """Encoder-decoder with concatenated skips; output keeps the input resolution."""

    def __init__(self, in_channels: int, base: int = 32, max_channels: int = 128, depth: int = 3):
        super().__init__()
        self.down = nn.ModuleList()
        chans = [in_channels]
        for i in range(depth):
            cout = min(max_channels, base * 2 ** i)
            self.down.append(nn.Sequential(_ConvAct(chans[-1], cout), nn.AvgPool2d(2)))
            chans.append(cout)
        self.up = nn.ModuleList()
        cur = chans[-1]
        for i in reversed(range(depth)):
            cout = min(max_channels, base * 2 ** max(i - 1, 0))
            self.up.append(_ConvAct(cur, cout))
            cur = cout + chans[i]
        self.out_channels = cur

    def forward(self, x):
        skips = [x]
        for block in self.down:
            skips.append(block(skips[-1]))
        out = skips.pop()
        for block in self.up:
            out = block(F.interpolate(out, scale_factor=2, mode="nearest"))
            out = torch.cat([out, skips.pop()], dim=1)
        return out


def _principal_frame(weights: torch.Tensor, coords: torch.Tensor):
    """Intensity-weighted centroid, unit major axis and its standard deviation."""
    p = weights / weights.sum(dim=(-2, -1), keepdim=True).clamp_min(1e-12)
    mean = torch.einsum("bhw,hwc->bc", p, coords)
    d = coords.unsqueeze(0) - mean[:, None, None, :]
    cov = torch.einsum("bhw,bhwi,bhwj->bij", p, d, d)
    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    theta = 0.5 * torch.atan2(2 * b, a - c)
    axis = torch.stack([torch.cos(theta), torch.sin(theta)], dim=-1)
    # orient the axis downwards so the region order is stable
    axis = torch.where(axis[:, 1:2] < 0, -axis, axis)
    lam = 0.5 * (a + c) + torch.sqrt((0.5 * (a - c)) ** 2 + b ** 2)
    return mean, axis, torch.sqrt(lam.clamp_min(1e-8))


class RegionEstimator(nn.Module):
    """K spatially normalised region heatmaps at ``heatmap_size`` resolution.

    With ``use_prior`` the learned logits are added to a fixed layout prior:
    log-intensity plus K stripes tiling the object's principal axis.  The
    prior is equivariant to rotation, translation and scaling of the input.
    """

    def __init__(self, num_regions: int = 10, heatmap_size: int = 64, use_prior: bool = True,
                 base: int = 16, depth: int = 3):
        super().__init__()
        self.num_regions = num_regions
        self.heatmap_size = heatmap_size
        self.use_prior = use_prior
        self.hourglass = Hourglass(1, base, 128, depth)
        self.head = nn.Conv2d(self.hourglass.out_channels, num_regions, 3, padding=1)
        if use_prior:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)
        self.register_buffer("coords", coordinate_grid(heatmap_size, heatmap_size), persistent=False)
        half = math.sqrt(3.0)  # a uniform bar spans +-sqrt(3) standard deviations
        anchors = -half + half * (2 * torch.arange(num_regions, dtype=torch.float32) + 1) / num_regions
        self.register_buffer("anchors", anchors, persistent=False)
        self.stripe_sigma = 0.6 * 2 * half / num_regions

    def downsample(self, image: torch.Tensor) -> torch.Tensor:
        if image.shape[-1] == self.heatmap_size:
            return image
        return F.interpolate(image, size=(self.heatmap_size, self.heatmap_size), mode="area")

    def prior_logits(self, small: torch.Tensor) -> torch.Tensor:
        w = small[:, 0].clamp_min(0)
        mean, axis, spread = _principal_frame(w, self.coords)
        d = self.coords.unsqueeze(0) - mean[:, None, None, :]
        u = (d * axis[:, None, None, :]).sum(-1) / spread[:, None, None]
        stripes = -(u.unsqueeze(1) - self.anchors[None, :, None, None]) ** 2 / (2 * self.stripe_sigma ** 2)
        return stripes + torch.log(w + PRIOR_FLOOR).unsqueeze(1)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        small = self.downsample(image)
        logits = self.head(self.hourglass(small))
        if self.use_prior:
            logits = logits + self.prior_logits(small)
        b, k, h, w = logits.shape
        return F.softmax(logits.reshape(b, k, h * w), dim=-1).reshape(b, k, h, w)


def region_moments(heatmap: torch.Tensor, coords: torch.Tensor | None = None, eps: float = COV_EPS):
    """Mean (…, 2) and regularised covariance (…, 2, 2) of heatmaps (…, h, w).

    All-zero heatmaps fall back to the uniform distribution.
    """
    h, w = heatmap.shape[-2:]
    if coords is None:
        coords = coordinate_grid(h, w, dtype=heatmap.dtype, device=heatmap.device)
    total = heatmap.sum(dim=(-2, -1), keepdim=True)
    uniform = torch.full_like(heatmap, 1.0 / (h * w))
    p = torch.where(total > 1e-12, heatmap / total.clamp_min(1e-12), uniform)
    mean = torch.einsum("...hw,hwc->...c", p, coords)
    d = coords - mean[..., None, None, :]
    cov = torch.einsum("...hw,...hwi,...hwj->...ij", p, d, d)
    eye = torch.eye(2, dtype=heatmap.dtype, device=heatmap.device)
    return mean, cov + eps * eye


class RegionMotion(NamedTuple):
    affine: torch.Tensor         # (…, 2, 2) maps source-region offsets to driving-region offsets
    translation: torch.Tensor    # (…, 2) drv_mean - affine @ src_mean
    inverse: torch.Tensor        # (…, 2, 2) affine^-1
    src_mean: torch.Tensor
    drv_mean: torch.Tensor


def region_affine(src_mean, src_cov, drv_mean, drv_cov) -> RegionMotion:
    """Affine A = drv_cov^1/2 src_cov^-1/2 carrying the source region onto the driving one."""
    src_root, drv_root = sqrtm2(src_cov), sqrtm2(drv_cov)
    affine = drv_root @ inv2(src_root)
    inverse = src_root @ inv2(drv_root)
    translation = drv_mean - (affine @ src_mean.unsqueeze(-1)).squeeze(-1)
    return RegionMotion(affine, translation, inverse, src_mean, drv_mean)


def region_flows(motion: RegionMotion, coords: torch.Tensor) -> torch.Tensor:
    """Backward flow A^-1 (z - drv_mean) + src_mean for every pixel z; (B, K, h, w, 2)."""
    d = coords[None, None] - motion.drv_mean[:, :, None, None, :]
    return torch.einsum("bkij,bkhwj->bkhwi", motion.inverse, d) + motion.src_mean[:, :, None, None, :]


def affine_flow(theta: torch.Tensor, coords: torch.Tensor, batch: int) -> torch.Tensor:
    """Flow of a single 2x3 affine applied to every pixel; (B, 1, h, w, 2)."""
    out = torch.einsum("ij,hwj->hwi", theta[:, :2], coords) + theta[:, 2]
    return out.expand(batch, 1, *out.shape)


def compose_flow(confidence: torch.Tensor, candidates: torch.Tensor) -> torch.Tensor:
    """Pixelwise convex combination Σ_k confidence_k · flow_k; (B, H, W, 2)."""
    return torch.einsum("bkhw,bkhwc->bhwc", confidence, candidates)


@dataclass
class MotionField:
    flow: torch.Tensor        # (B, H, W, 2) absolute normalised sampling grid
    confidence: torch.Tensor  # (B, K+1, H, W); channel 0 is the background
    occlusion: torch.Tensor   # (B, 1, H, W)


@dataclass
class GeneratorOutput:
    image: torch.Tensor
    motion: MotionField
    deformed: torch.Tensor          # source warped at full resolution
    heatmaps_source: torch.Tensor
    heatmaps_driving: torch.Tensor


class DenseMotionNetwork(nn.Module):
    """Predicts (K+1) confidence maps and an occlusion map from the source
    deformed by every candidate motion and the heatmap differences."""

    def __init__(self, num_regions: int, heatmap_size: int, use_prior: bool = True,
                 base: int = 32, depth: int = 3, background_logit: float = -4.5):
        super().__init__()
        self.num_regions = num_regions
        self.use_prior = use_prior
        self.background_logit = background_logit
        self.hourglass = Hourglass(2 * num_regions + 1, base, 128, depth)
        self.mask = nn.Conv2d(self.hourglass.out_channels, num_regions + 1, 3, padding=1)
        self.occlusion = nn.Conv2d(self.hourglass.out_channels, 1, 3, padding=1)
        nn.init.zeros_(self.occlusion.weight)
        nn.init.constant_(self.occlusion.bias, 6.0)
        if use_prior:
            nn.init.zeros_(self.mask.weight)
            nn.init.zeros_(self.mask.bias)

    def prior_logits(self, coords, drv_mean, drv_cov):
        d = coords[None, None] - drv_mean[:, :, None, None, :]
        prec = inv2(drv_cov)
        maha = torch.einsum("bkhwi,bkij,bkhwj->bkhw", d, prec, d)
        bg = torch.full_like(maha[:, :1], self.background_logit)
        return torch.cat([bg, -0.5 * maha], dim=1)

    def forward(self, source_small, heat_src, heat_drv, candidates, coords, drv_mean, drv_cov):
        b, k1, h, w, _ = candidates.shape
        stacked = source_small.expand(b, k1, h, w).reshape(b * k1, 1, h, w)
        deformed = warp(stacked, candidates.reshape(b * k1, h, w, 2)).reshape(b, k1, h, w)
        peak_s = heat_src.detach().amax(dim=(2, 3), keepdim=True).clamp_min(1e-12)
        peak_d = heat_drv.detach().amax(dim=(2, 3), keepdim=True).clamp_min(1e-12)
        diff = heat_drv / peak_d - heat_src / peak_s
        feats = self.hourglass(torch.cat([deformed, diff], dim=1))
        logits = self.mask(feats)
        if self.use_prior:
            logits = logits + self.prior_logits(coords, drv_mean, drv_cov)
        return F.softmax(logits, dim=1), torch.sigmoid(self.occlusion(feats)), deformed


class MotionTransformGenerator(nn.Module):
    def __init__(self, num_regions: int = 10, heatmap_size: int = 64, image_size: int = 256,
                 use_prior: bool = True, channels=(16, 32, 64)):
        super().__init__()
        if not 1 <= num_regions <= 32:
            raise ValueError("num_regions must be in [1, 32]")
        if image_size % heatmap_size:
            raise ValueError("heatmap_size must divide image_size")
        self.num_regions = num_regions
        self.heatmap_size = heatmap_size
        self.image_size = image_size
        self.region_estimator = RegionEstimator(num_regions, heatmap_size, use_prior)
        self.dense_motion = DenseMotionNetwork(num_regions, heatmap_size, use_prior)
        self.background = nn.Parameter(torch.tensor([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))
        c1, c2, c3 = channels
        n_down = int(round(math.log2(image_size // heatmap_size)))
        enc = [_ConvAct(1, c1, 3)]
        cin = c1
        for i in range(n_down):
            cout = c2 if i < n_down - 1 else c3
            enc.append(_ConvAct(cin, cout, 3, stride=2))
            cin = cout
        self.encoder = nn.Sequential(*enc)
        self.bottleneck = _ConvAct(cin, cin)
        dec = []
        for i in range(n_down):
            cout = c2 if i < n_down - 1 else c1
            dec.append(_ConvAct(cin, cout))
            cin = cout
        self.decoder = nn.ModuleList(dec)
        self.final = nn.Conv2d(cin + 1, 1, 3, padding=1)
        nn.init.zeros_(self.final.weight)
        nn.init.zeros_(self.final.bias)
        self.register_buffer("coords_small", coordinate_grid(heatmap_size, heatmap_size), persistent=False)
        self.register_buffer("coords_full", coordinate_grid(image_size, image_size), persistent=False)

    def estimate_motion(self, source: torch.Tensor, driving: torch.Tensor):
        """Heatmaps, region motions and (K+1) candidate flows at heatmap resolution."""
        heat_src = self.region_estimator(source)
        heat_drv = self.region_estimator(driving)
        src_mean, src_cov = region_moments(heat_src, self.coords_small)
        drv_mean, drv_cov = region_moments(heat_drv, self.coords_small)
        motion = region_affine(src_mean, src_cov, drv_mean, drv_cov)
        return heat_src, heat_drv, motion, drv_cov

    def candidate_flows(self, motion: RegionMotion, coords: torch.Tensor) -> torch.Tensor:
        b = motion.src_mean.shape[0]
        bg = affine_flow(self.background, coords, b)
        return torch.cat([bg, region_flows(motion, coords)], dim=1)

    def forward(self, source: torch.Tensor, driving: torch.Tensor) -> GeneratorOutput:
        heat_src, heat_drv, motion, drv_cov = self.estimate_motion(source, driving)
        cand_small = self.candidate_flows(motion, self.coords_small)
        source_small = self.region_estimator.downsample(source)
        conf, occ, _ = self.dense_motion(source_small, heat_src, heat_drv, cand_small,
                                         self.coords_small, motion.drv_mean, drv_cov)
        flow_small = compose_flow(conf, cand_small)

        size = (self.image_size, self.image_size)
        conf_full = F.interpolate(conf, size=size, mode="bilinear", align_corners=False)
        occ_full = F.interpolate(occ, size=size, mode="bilinear", align_corners=False)
        # upsampling the displacement rather than the absolute grid keeps identity motion exact
        disp = (flow_small - self.coords_small).permute(0, 3, 1, 2)
        disp = F.interpolate(disp, size=size, mode="bilinear", align_corners=False)
        flow_full = self.coords_full + disp.permute(0, 2, 3, 1)

        feats = self.bottleneck(warp(self.encoder(source), flow_small) * occ)
        for i, block in enumerate(self.decoder):
            if i:
                feats = F.interpolate(feats, scale_factor=2, mode="bilinear", align_corners=False)
            feats = block(feats)
        feats = F.interpolate(feats, size=size, mode="bilinear", align_corners=False)
        deformed = warp(source, flow_full)
        direct = deformed * occ_full
        image = (direct + self.final(torch.cat([feats, direct], dim=1))).clamp(0.0, 1.0)
        return GeneratorOutput(image, MotionField(flow_full, conf_full, occ_full), deformed, heat_src, heat_drv)


# ---------------------------------------------------------------------------
# losses


def _resize(x: torch.Tensor, scale: float) -> torch.Tensor:
    if scale == 1:
        return x
    h, w = x.shape[-2:]
    return F.interpolate(x, size=(max(1, int(round(h * scale))), max(1, int(round(w * scale)))), mode="area")


def perceptual_loss(pred: torch.Tensor, target: torch.Tensor, backbone: nn.Module,
                    scales=(1.0, 0.5, 0.25, 0.125)) -> torch.Tensor:
    """Σ over scales of the mean absolute difference of the image and of every
    backbone stage activation."""
    total = pred.new_zeros(())
    for s in scales:
        p, t = _resize(pred, s), _resize(target, s)
        total = total + (p - t).abs().mean()
        for fp, ft in zip(backbone(p), backbone(t)):
            total = total + (fp - ft).abs().mean()
    return total


@dataclass(frozen=True)
class SimilarityTransform:
    """Content map p -> scale * R(angle) p + shift, in normalised coordinates."""

    angle: float = 0.0
    scale: float = 1.0
    shift: tuple[float, float] = (0.0, 0.0)

    @property
    def is_identity(self) -> bool:
        return self.angle == 0.0 and self.scale == 1.0 and self.shift == (0.0, 0.0)

    def matrix(self, dtype=torch.float32) -> torch.Tensor:
        c, s = math.cos(self.angle), math.sin(self.angle)
        return self.scale * torch.tensor([[c, -s], [s, c]], dtype=dtype)

    def apply(self, image: torch.Tensor) -> torch.Tensor:
        if self.is_identity:
            return image
        b, _, h, w = image.shape
        m = self.matrix(image.dtype)
        t = torch.tensor(self.shift, dtype=image.dtype)
        coords = coordinate_grid(h, w, dtype=image.dtype)
        # output pixel z reads the input at T^-1(z) = m^-1 (z - t)
        grid = torch.einsum("ij,hwj->hwi", torch.linalg.inv(m), coords - t)
        return warp(image, grid.unsqueeze(0).expand(b, h, w, 2))


def sample_transform(gen: torch.Generator, image_size: int = 256, max_angle_deg: float = 15.0,
                     max_shift_px: float = 10.0, scale_range=(0.9, 1.1)) -> SimilarityTransform:
    u = torch.rand(4, generator=gen, dtype=torch.float64).tolist()
    angle = math.radians(max_angle_deg) * (2 * u[0] - 1)
    scale = scale_range[0] + (scale_range[1] - scale_range[0]) * u[1]
    shift = tuple(2.0 * max_shift_px / image_size * (2 * v - 1) for v in u[2:])
    return SimilarityTransform(angle, scale, shift)


def equivariance_loss(estimator: RegionEstimator, image: torch.Tensor, transform: SimilarityTransform,
                      return_terms: bool = False, heatmap: torch.Tensor | None = None):
    """Moments of the regions found on the transformed image against the
    transformed moments of the regions found on the original image.

    Returns the sum of the mean term (Σ_k Euclidean error of region means) and
    the covariance term (Σ_k Frobenius error), averaged over the batch.
    ``heatmap`` may carry an already computed ``estimator(image)``.
    """
    heat = estimator(image) if heatmap is None else heatmap
    heat_t = heat if transform.is_identity else estimator(transform.apply(image))
    coords = coordinate_grid(*heat.shape[-2:], dtype=heat.dtype)
    mean, cov = region_moments(heat, coords, eps=0.0)
    mean_t, cov_t = region_moments(heat_t, coords, eps=0.0)
    m = transform.matrix(heat.dtype)
    shift = torch.tensor(transform.shift, dtype=heat.dtype)
    expected_mean = mean @ m.T + shift
    expected_cov = m @ cov @ m.T
    mean_term = torch.linalg.vector_norm(mean_t - expected_mean, dim=-1).sum(-1).mean()
    cov_term = torch.linalg.matrix_norm(cov_t - expected_cov).sum(-1).mean()
    total = mean_term + cov_term
    return (total, mean_term, cov_term) if return_terms else total
