"""Unsupervised motion representation.

Keypoint detection on source/driving frames, grouped thin-plate-spline
transform fitting, candidate-flow generation, and the dense-motion
hourglass that produces motion features, a combined flow field and
occlusion logits.

Thin-plate splines here use the standard system: an affine part plus
radial terms U(r^2) = r^2 log(r^2) anchored at the control points, with
side conditions sum(w) = 0 and sum(w * c) = 0.  Groups are fitted from
driving to source coordinates so candidate flows sample from the source
(backward warping).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Module, Tensor

RIDGE = 1e-6
COND_LIMIT = 1e10


# ----------------------------------------------------------------------
# thin-plate splines
# ----------------------------------------------------------------------

@dataclass
class TPSParams:
    """One fitted thin-plate transform.

    affine: (2, 3) matrix A, mapping z -> A @ [z_x, z_y, 1].
    weights: (n, 2) radial coefficients.
    control_points: (n, 2) source coordinates of the fit.
    """
    affine: Tensor
    weights: Tensor
    control_points: Tensor


def _const(arr, like=None):
    dtype = like.dtype if like is not None else np.float64
    return Tensor(np.asarray(arr, dtype=dtype))


def fit_tps_batch(src, dst):
    """Fit G thin-plate transforms at once; src, dst: (G, n, 2) Tensors.

    Solves the standard interpolation system per group, adding a ridge of
    1e-6 on the diagonal of any group whose system is singular or badly
    conditioned.  Differentiable in both src and dst.
    Returns (affine (G,2,3), weights (G,n,2)).
    """
    g, n, _ = src.shape
    s1 = T.broadcast_to(T.reshape(src, (g, n, 1, 2)), (g, n, n, 2))
    s2 = T.broadcast_to(T.reshape(src, (g, 1, n, 2)), (g, n, n, 2))
    diff = T.sub(s1, s2)
    d2 = T.sum_(T.mul(diff, diff), axis=3)
    kmat = T.xlogx(d2)                                      # (G,n,n)
    ones = _const(np.ones((g, n, 1)), src)
    p = T.concat([src, ones], axis=2)                       # (G,n,3)
    zeros33 = _const(np.zeros((g, 3, 3)), src)
    top = T.concat([kmat, p], axis=2)                       # (G,n,n+3)
    bottom = T.concat([T.transpose(p, (0, 2, 1)), zeros33], axis=2)
    lmat = T.concat([top, bottom], axis=1)                  # (G,n+3,n+3)

    with np.errstate(all="ignore"):
        conds = np.array([np.linalg.cond(m) for m in lmat.data])
    flagged = ~np.isfinite(conds) | (conds > COND_LIMIT)
    if flagged.any():
        eye = np.zeros_like(lmat.data)
        eye[flagged] = RIDGE * np.eye(n + 3, dtype=lmat.data.dtype)
        lmat = T.add(lmat, _const(eye, src))

    zeros32 = _const(np.zeros((g, 3, 2)), src)
    rhs = T.concat([dst, zeros32], axis=1)                  # (G,n+3,2)
    theta = T.solve(lmat, rhs)
    weights = T.slice_axis(theta, 1, 0, n)                  # (G,n,2)
    affine = T.transpose(T.slice_axis(theta, 1, n, n + 3), (0, 2, 1))  # (G,2,3)
    return affine, weights


def fit_tps(src, dst):
    """Fit one transform sending each src point to its dst point."""
    src = src if isinstance(src, Tensor) else Tensor(np.asarray(src, dtype=np.float64))
    dst = dst if isinstance(dst, Tensor) else Tensor(np.asarray(dst, dtype=np.float64))
    n = src.shape[0]
    affine, weights = fit_tps_batch(T.reshape(src, (1, n, 2)), T.reshape(dst, (1, n, 2)))
    return TPSParams(affine=T.reshape(affine, (2, 3)),
                     weights=T.reshape(weights, (n, 2)),
                     control_points=src)


def tps_apply_points(affine, weights, control, points):
    """Evaluate batched transforms at points.

    affine (G,2,3), weights (G,n,2), control (G,n,2), points (G,M,2) ->
    (G,M,2).
    """
    g, n, _ = control.shape
    m = points.shape[1]
    lin = T.matmul(points, T.transpose(T.slice_axis(affine, 2, 0, 2), (0, 2, 1)))
    off = T.broadcast_to(T.reshape(T.slice_axis(affine, 2, 2, 3), (g, 1, 2)), (g, m, 2))
    out = T.add(lin, off)
    pz = T.broadcast_to(T.reshape(points, (g, m, 1, 2)), (g, m, n, 2))
    cz = T.broadcast_to(T.reshape(control, (g, 1, n, 2)), (g, m, n, 2))
    dd = T.sub(pz, cz)
    r2 = T.sum_(T.mul(dd, dd), axis=3)                       # (G,M,n)
    u = T.xlogx(r2)
    return T.add(out, T.matmul(u, weights))


def tps_apply(params, grid_h, grid_w):
    """Evaluate one transform over the normalized pixel grid -> (H,W,2)."""
    grid = T.identity_grid(grid_h, grid_w).reshape(-1, 2)
    pts = _const(grid[None], params.control_points)
    n = params.control_points.shape[0]
    out = tps_apply_points(T.reshape(params.affine, (1, 2, 3)),
                           T.reshape(params.weights, (1, n, 2)),
                           T.reshape(params.control_points, (1, n, 2)),
                           pts)
    return T.reshape(out, (grid_h, grid_w, 2))


def random_tps_deformation(rng, grid_points=5, sigma=0.05):
    """Random smooth deformation: jittered control grid fitted by TPS."""
    axis = np.linspace(-1.0, 1.0, grid_points)
    base = np.stack(np.meshgrid(axis, axis, indexing="xy"), axis=-1).reshape(-1, 2)
    jitter = rng.normal(0.0, sigma, size=base.shape)
    return fit_tps(base, base + jitter)


# ----------------------------------------------------------------------
# keypoints
# ----------------------------------------------------------------------

def soft_argmax(scores, beta=1.0):
    """Spatial softmax + coordinate expectation.

    scores: (N, K, h, w) -> (N, K, 2) normalized (x, y) in (-1, 1).
    """
    n, k, h, w = scores.shape
    flat = T.reshape(scores if beta == 1.0 else T.scale(scores, beta), (n * k, h * w))
    prob = T.softmax(flat, axis=1)
    grid = T.identity_grid(h, w).reshape(h * w, 2)
    coords = T.matmul(prob, _const(grid, scores))
    return T.reshape(coords, (n, k, 2))


def gaussian_maps(kps, h, w, sigma):
    """Per-keypoint maps exp(-|z - k|^2 / (2 sigma^2)), peak value 1.

    kps: (N, K, 2) normalized; sigma in normalized units.  -> (N, K, h, w)
    """
    n, k, _ = kps.shape
    grid = T.identity_grid(h, w)
    gz = _const(grid.reshape(1, 1, h, w, 2), kps)
    kz = T.broadcast_to(T.reshape(kps, (n, k, 1, 1, 2)), (n, k, h, w, 2))
    diff = T.sub(T.broadcast_to(gz, (n, k, h, w, 2)), kz)
    d2 = T.sum_(T.mul(diff, diff), axis=4)
    return T.exp(T.scale(d2, -0.5 / (sigma * sigma)))


class ConvBlock(Module):
    """3x3 conv + instance norm + ReLU, the repo-wide block recipe."""

    def __init__(self, cin, cout, rng, kernel=3, dtype=np.float64):
        k = kernel
        std = np.sqrt(2.0 / (cin * k * k))
        self.w = T.parameter(rng.normal(0.0, std, (cout, cin, k, k)), dtype=dtype)
        self.b = T.parameter(np.zeros(cout), dtype=dtype)
        self.gamma = T.parameter(np.ones(cout), dtype=dtype)
        self.beta = T.parameter(np.zeros(cout), dtype=dtype)
        self.pad = k // 2

    def __call__(self, x):
        y = T.conv2d(x, self.w, self.b, stride=1, padding=self.pad)
        return T.relu(T.instance_norm(y, self.gamma, self.beta))


class Conv2dLayer(Module):
    """Bare conv layer (no norm / activation)."""

    def __init__(self, cin, cout, rng, kernel=3, dtype=np.float64):
        k = kernel
        std = np.sqrt(2.0 / (cin * k * k))
        self.w = T.parameter(rng.normal(0.0, std, (cout, cin, k, k)), dtype=dtype)
        self.b = T.parameter(np.zeros(cout), dtype=dtype)
        self.pad = k // 2

    def __call__(self, x):
        return T.conv2d(x, self.w, self.b, stride=1, padding=self.pad)


class KeypointDetector(Module):
    """Score-map convnet + soft-argmax over K motion keypoints."""

    def __init__(self, num_keypoints, channels=(16, 32), rng=None, dtype=np.float64):
        rng = rng if rng is not None else np.random.default_rng(0)
        c1, c2 = channels
        self.block1 = ConvBlock(3, c1, rng, dtype=dtype)
        self.block2 = ConvBlock(c1, c2, rng, dtype=dtype)
        self.head = Conv2dLayer(c2, num_keypoints, rng, kernel=7, dtype=dtype)
        self.num_keypoints = num_keypoints

    def score_maps(self, images):
        """images: (N,3,H,W) -> (N,K,H/4,W/4) keypoint score maps."""
        x = T.avgpool2(self.block1(images))
        x = T.avgpool2(self.block2(x))
        return self.head(x)

    def detect(self, images):
        """images: (N,3,H,W) -> (N,K,2) normalized keypoint coordinates."""
        return soft_argmax(self.score_maps(images))


# ----------------------------------------------------------------------
# dense motion
# ----------------------------------------------------------------------

@dataclass
class DenseMotionOutput:
    """Everything the generator and losses need about the motion field."""
    candidate_flows: Tensor   # (N, G+1, Hf, Wf, 2) incl. identity background
    contribution: Tensor      # (N, G+1, Hf, Wf), softmax over candidates
    combined_flow: Tensor     # (N, Hf, Wf, 2)
    occlusion_logits: Tensor  # (N, 1, Hf, Wf)
    motion_features: Tensor   # (N, Cm, Hf, Wf)

    @property
    def num_candidates(self):
        return self.candidate_flows.shape[1]


class Hourglass(Module):
    """2-down / 2-up conv hourglass with skip concatenation."""

    def __init__(self, cin, base, cout, rng, dtype=np.float64):
        self.down1 = ConvBlock(cin, base, rng, dtype=dtype)
        self.down2 = ConvBlock(base, base * 2, rng, dtype=dtype)
        self.up1 = ConvBlock(base * 2, base, rng, dtype=dtype)
        self.up2 = ConvBlock(base * 3, base, rng, dtype=dtype)
        self.out = ConvBlock(base * 2, cout, rng, dtype=dtype)

    def __call__(self, x):
        d1 = self.down1(x)
        p1 = T.avgpool2(d1)
        d2 = self.down2(p1)
        p2 = T.avgpool2(d2)
        u1 = self.up1(T.bilinear_resize(p2, d2.shape[2], d2.shape[3]))
        u1 = T.concat([u1, d2], axis=1)
        u2 = self.up2(T.bilinear_resize(u1, d1.shape[2], d1.shape[3]))
        return self.out(T.concat([u2, d1], axis=1))


class DenseMotion(Module):
    """Candidate TPS flows + hourglass emitting flow/occlusion/features."""

    def __init__(self, num_keypoints=25, group_size=5, base_channels=32,
                 feature_channels=32, gaussian_sigma=0.1, rng=None,
                 dtype=np.float64):
        if num_keypoints % group_size:
            raise ValueError("num_keypoints must be divisible by group_size")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.num_keypoints = num_keypoints
        self.group_size = group_size
        self.num_groups = num_keypoints // group_size
        self.gaussian_sigma = gaussian_sigma
        cin = (self.num_groups + 1) * 3 + num_keypoints
        self.hourglass = Hourglass(cin, base_channels, feature_channels, rng, dtype=dtype)
        self.contribution_head = Conv2dLayer(feature_channels, self.num_groups + 1,
                                             rng, kernel=7, dtype=dtype)
        self.occlusion_head = Conv2dLayer(feature_channels, 1, rng, kernel=7, dtype=dtype)

    def candidate_flows(self, kp_source, kp_driving, hf, wf):
        """Backward-sampling flows, one per group, plus identity. -> (N,G+1,hf,wf,2)"""
        n = kp_source.shape[0]
        g, s = self.num_groups, self.group_size
        src_groups = T.reshape(kp_driving, (n * g, s, 2))   # driving -> source fit
        dst_groups = T.reshape(kp_source, (n * g, s, 2))
        affine, weights = fit_tps_batch(src_groups, dst_groups)
        grid = T.identity_grid(hf, wf).reshape(-1, 2)
        pts = T.broadcast_to(_const(grid.reshape(1, -1, 2), kp_source),
                             (n * g, hf * wf, 2))
        flows = tps_apply_points(affine, weights, src_groups, pts)
        flows = T.reshape(flows, (n, g, hf, wf, 2))
        ident = _const(np.broadcast_to(T.identity_grid(hf, wf)[None, None],
                                       (n, 1, hf, wf, 2)).copy(), kp_source)
        return T.concat([ident, flows], axis=1)

    def __call__(self, source_image, kp_source, kp_driving):
        """source_image: (N,3,H,W); keypoints: (N,K,2) -> DenseMotionOutput.

        The motion field lives at quarter resolution of the input.
        """
        n, _, h, w = source_image.shape
        hf, wf = h // 4, w // 4
        gp1 = self.num_groups + 1

        cands = self.candidate_flows(kp_source, kp_driving, hf, wf)
        src_small = T.bilinear_resize(source_image, hf, wf)
        rep = T.broadcast_to(T.reshape(src_small, (n, 1, 3, hf, wf)), (n, gp1, 3, hf, wf))
        warped = T.grid_sample(T.reshape(rep, (n * gp1, 3, hf, wf)),
                               T.reshape(cands, (n * gp1, hf, wf, 2)))
        warped = T.reshape(warped, (n, gp1 * 3, hf, wf))

        gdiff = T.sub(gaussian_maps(kp_driving, hf, wf, self.gaussian_sigma),
                      gaussian_maps(kp_source, hf, wf, self.gaussian_sigma))
        feats = self.hourglass(T.concat([warped, gdiff], axis=1))

        logits = self.contribution_head(feats)
        contribution = T.softmax(logits, axis=1)            # (N,G+1,hf,wf)
        occlusion = self.occlusion_head(feats)

        combined = combine_flows(contribution, cands)
        return DenseMotionOutput(candidate_flows=cands, contribution=contribution,
                                 combined_flow=combined, occlusion_logits=occlusion,
                                 motion_features=feats)


def combine_flows(contribution, candidates):
    """Convex combination of candidate flows. -> (N, Hf, Wf, 2)"""
    n, gp1, hf, wf = contribution.shape
    cw = T.broadcast_to(T.reshape(contribution, (n, gp1, hf, wf, 1)),
                        (n, gp1, hf, wf, 2))
    return T.sum_(T.mul(cw, candidates), axis=1)
