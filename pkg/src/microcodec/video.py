"""Video coding with latent-space residuals.

Each predicted frame is coded as a compressed flow field plus the quantized
difference between its latent and the latent of the motion-compensated
prediction. The image encoder and its entropy model stay frozen; training
only touches the frame-prediction parts and the residual entropy model.

The reconstruction chain that feeds motion estimation always runs through
the model's fixed reference decoder (the teacher's), so the bitstream does
not depend on which decoder renders the output frames.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .bitstream import (
    DEFAULT_SUPPORT_RADIUS,
    GOPBitstream,
    GOPPayload,
    PFramePayload,
    WeightBundle,
    unpack_weight_bundle,
)
from .codec import (
    LRELU_SLOPE,
    ScaleHyperprior,
    TeacherModel,
    _conv,
    _UpConv,
    decode_full,
    decode_latent,
    encode,
    encode_latent,
    teacher_reconstruct,
)
from .config import VideoConfig, config_from_dict, config_to_dict
from .errors import ConfigError, CorruptStreamError, DataError, IncompatibleBundleError, ShapeError
from .flow import PyramidFlowNet, estimate_flow, warp
from .metrics import perceptual_distance
from .micro_net import MicroResNet, student_decode
from .utils import pad_to_multiple, seeded_generator, weights_crc32


class FlowCodec(nn.Module):
    """Hyperprior autoencoder over 2-channel flow fields (stride 16)."""

    def __init__(self, cfg: VideoConfig):
        super().__init__()
        ch = cfg.flow_channels
        self.encoder = nn.Sequential(
            nn.Conv2d(2, ch, 5, stride=2, padding=2),
            nn.LeakyReLU(LRELU_SLOPE),
            nn.Conv2d(ch, ch, 5, stride=2, padding=2),
            nn.LeakyReLU(LRELU_SLOPE),
            nn.Conv2d(ch, ch, 5, stride=2, padding=2),
            nn.LeakyReLU(LRELU_SLOPE),
            nn.Conv2d(ch, ch, 5, stride=2, padding=2),
        )
        self.decoder = nn.Sequential(
            _UpConv(ch, ch),
            nn.LeakyReLU(LRELU_SLOPE),
            _UpConv(ch, ch),
            nn.LeakyReLU(LRELU_SLOPE),
            _UpConv(ch, max(ch // 2, 8)),
            nn.LeakyReLU(LRELU_SLOPE),
            _UpConv(max(ch // 2, 8), max(ch // 4, 8)),
            nn.LeakyReLU(LRELU_SLOPE),
            _conv(max(ch // 4, 8), 2),
        )
        self.em = ScaleHyperprior(ch, cfg.flow_hyper_channels, zero_init_mu=True)
        # decoded flow starts at zero so the initial warp is the identity
        nn.init.zeros_(self.decoder[-1].weight)
        nn.init.zeros_(self.decoder[-1].bias)

    def decode(self, w_hat: Tensor, size: tuple[int, int]) -> Tensor:
        return self.decoder(w_hat)[..., : size[0], : size[1]]


class MotionCompNet(nn.Module):
    """Fixes warping artifacts; a residual conv stack on (prev, warped, flow)."""

    def __init__(self, channels: int = 32):
        super().__init__()
        c = channels
        self.net = nn.Sequential(
            _conv(8, c),
            nn.LeakyReLU(LRELU_SLOPE),
            _conv(c, c),
            nn.LeakyReLU(LRELU_SLOPE),
            _conv(c, c),
            nn.LeakyReLU(LRELU_SLOPE),
            _conv(c, c),
            nn.LeakyReLU(LRELU_SLOPE),
            _conv(c, c),
            nn.LeakyReLU(LRELU_SLOPE),
            _conv(c, 3),
        )
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    def forward(self, x_prev_hat: Tensor, x_warp: Tensor, f_hat: Tensor) -> Tensor:
        r = self.net(torch.cat([x_prev_hat, x_warp, f_hat], dim=-3))
        return (x_warp + r).clamp(0.0, 1.0)


class VideoModel(nn.Module):
    """Frame prediction (flow + compensation) plus the latent-residual entropy model.

    Holds an unregistered reference to the frozen teacher, whose encoder and
    entropy model are reused and whose decoder anchors the reference chain.
    """

    def __init__(self, teacher: TeacherModel, config: VideoConfig):
        super().__init__()
        torch.manual_seed(config.seed)
        self.config = config
        self.flow_net = PyramidFlowNet()
        self.flow_codec = FlowCodec(config)
        self.mc_net = MotionCompNet(config.mc_channels)
        self.residual_em = ScaleHyperprior(teacher.config.latent_channels, config.residual_hyper_channels, zero_init_mu=True)
        teacher.eval()
        teacher.requires_grad_(False)
        self._teacher_ref = (teacher,)

    @property
    def teacher(self) -> TeacherModel:
        return self._teacher_ref[0]


def motion_compensate(x_prev_hat: Tensor, x_warp: Tensor, f_hat: Tensor, model: VideoModel) -> Tensor:
    """Refined temporal prediction from the warped previous reconstruction."""
    if x_prev_hat.shape != x_warp.shape:
        raise ShapeError("previous frame and warped frame must share one shape")
    return model.mc_net(*_batch3(x_prev_hat, x_warp, f_hat))


def _batch3(a: Tensor, b: Tensor, c: Tensor):
    if a.dim() == 3:
        return a.unsqueeze(0), b.unsqueeze(0), c.unsqueeze(0)
    return a, b, c


def flow_codec(f: Tensor, model: VideoModel, radius: int = DEFAULT_SUPPORT_RADIUS):
    """Round-trip a flow field through the flow autoencoder.

    Returns the quantized flow latent, the decoded flow, and the exact
    fixed-point rate estimate (latent plus hyper-latent bits) in bits.
    """
    squeeze = f.dim() == 3
    fb = f.unsqueeze(0) if squeeze else f
    h, w = fb.shape[-2:]
    with torch.no_grad():
        w_lat = model.flow_codec.encoder(fb)
        w_hat, z_bytes, w_bytes = encode_latent(w_lat, model.flow_codec.em, radius)
        f_hat = model.flow_codec.decode(w_hat if w_hat.dim() == 4 else w_hat.unsqueeze(0), (h, w))
    w_bits = (len(z_bytes) + len(w_bytes)) * 8.0
    if squeeze:
        return w_hat.squeeze(0) if w_hat.dim() == 4 else w_hat, f_hat.squeeze(0), w_bits
    return w_hat, f_hat, w_bits


def latent_residual(y_next: Tensor, y_pred: Tensor) -> Tensor:
    """Difference between the true frame's latent and the prediction's latent."""
    if y_next.shape != y_pred.shape:
        raise ShapeError("latents must share one shape")
    return y_next - y_pred


def reconstruct_latent(r_hat: Tensor, y_pred: Tensor) -> Tensor:
    """Add the coded residual back onto the prediction's latent."""
    if r_hat.shape != y_pred.shape:
        raise ShapeError("latents must share one shape")
    return r_hat + y_pred


# ---------------------------------------------------------------------------
# Phase losses


def _bpp(bits, x: Tensor):
    pixels = x.shape[-2] * x.shape[-1]
    if x.dim() == 4:
        pixels *= x.shape[0]
    return bits / pixels


def loss_warp(x_next: Tensor, x_warp_hat: Tensor, w_bits, lambda_w: float):
    """Phase 1: motion-compression rate plus warping distortion."""
    if x_next.shape != x_warp_hat.shape:
        raise ShapeError("frames must share one shape")
    return lambda_w * _bpp(w_bits, x_next) + F.mse_loss(x_next, x_warp_hat)


def loss_mc(x_next, x_pred, y_next, y_pred, w_bits, lambda_w: float, k_mse: float):
    """Phase 2: adds prediction distortion and an L1 pull between latents."""
    if x_next.shape != x_pred.shape or y_next.shape != y_pred.shape:
        raise ShapeError("frames and latents must share shapes")
    return (
        lambda_w * _bpp(w_bits, x_next)
        + k_mse * F.mse_loss(x_next, x_pred)
        + k_mse * F.l1_loss(y_next, y_pred)
    )


def loss_step(x_next, x_tilde_next, x_hat_next, w_bits, r_bits, lambda_w, k_mse, k_perceptual, d_p_seed: int = 0):
    """Phase 3: full per-frame objective against the teacher reconstruction."""
    if x_next.shape != x_tilde_next.shape or x_next.shape != x_hat_next.shape:
        raise ShapeError("frames must share one shape")
    loss = lambda_w * (_bpp(w_bits, x_next) + _bpp(r_bits, x_next))
    loss = loss + k_mse * F.mse_loss(x_tilde_next, x_hat_next)
    if k_perceptual > 0:
        loss = loss + k_perceptual * perceptual_distance(x_next, x_hat_next, seed=d_p_seed)
    return loss


def loss_final(frame_terms, lam, k_mse, k_perceptual, d_p_seed: int = 0):
    """Phase 4: the per-frame objective summed over a recurrent rollout.

    ``frame_terms`` is a sequence of (x, x_tilde, x_hat, w_bits, r_bits)
    tuples, one per rolled-out frame.
    """
    total = None
    for x, x_tilde, x_hat, w_bits, r_bits in frame_terms:
        term = lam * (_bpp(w_bits, x) + _bpp(r_bits, x)) + k_mse * F.mse_loss(x_tilde, x_hat)
        if k_perceptual > 0:
            term = term + k_perceptual * perceptual_distance(x, x_hat, seed=d_p_seed)
        total = term if total is None else total + term
    if total is None:
        raise ConfigError("loss_final needs at least one frame term")
    return total


# ---------------------------------------------------------------------------
# Training


def _encode_grad(x: Tensor, teacher: TeacherModel) -> Tensor:
    """Image encoder forward that keeps the graph (weights stay frozen)."""
    return teacher.encoder(pad_to_multiple(x, teacher.config.downsample_factor))


def _decode_grad(y: Tensor, teacher: TeacherModel, rn: MicroResNet | None) -> Tensor:
    feats = teacher.head(y)
    feats = rn(feats) if rn is not None else teacher.res_blocks(feats)
    return teacher.tail(feats)


def _gather_sequences(dataset) -> list:
    seqs = dataset if isinstance(dataset, (list, tuple)) else [dataset]
    out = [s for s in seqs if getattr(s, "frames", None)]
    if not out:
        raise DataError("video training dataset is empty")
    return out


class _VideoBatcher:
    """Samples aligned crop windows of consecutive frames plus cached teacher targets."""

    def __init__(self, sequences, teacher: TeacherModel, crop: int, seed: int):
        self.sequences = sequences
        self.crop = crop
        self.stride = teacher.config.downsample_factor
        if crop % self.stride:
            raise ConfigError(f"crop must be a multiple of the codec stride {self.stride}")
        self.rng = np.random.default_rng(seed)
        with torch.no_grad():
            self.recon = [
                [teacher_reconstruct(f, teacher) for f in seq.frames] for seq in sequences
            ]

    def sample(self, batch: int, span: int):
        """``span`` consecutive transitions: returns lists of stacked crops."""
        xs = [[] for _ in range(span + 1)]
        recs = [[] for _ in range(span + 1)]
        for _ in range(batch):
            si = int(self.rng.integers(len(self.sequences)))
            seq = self.sequences[si]
            if seq.frame_count < span + 1:
                raise ConfigError(f"sequence {seq.id!r} shorter than rollout span {span + 1}")
            t = int(self.rng.integers(seq.frame_count - span))
            h, w = seq.frames[0].shape[-2:]
            ci = int(self.rng.integers((h - self.crop) // self.stride + 1)) * self.stride
            cj = int(self.rng.integers((w - self.crop) // self.stride + 1)) * self.stride
            for k in range(span + 1):
                xs[k].append(seq.frames[t + k][..., ci : ci + self.crop, cj : cj + self.crop])
                recs[k].append(self.recon[si][t + k][..., ci : ci + self.crop, cj : cj + self.crop])
        return [torch.stack(x) for x in xs], [torch.stack(r) for r in recs]


def _p_transition_train(model, teacher, x_prev_ref, x_next, noise_gen, rn, with_residual: bool):
    """One differentiable P-frame transition; returns intermediates for the losses."""
    f = estimate_flow(x_next, x_prev_ref, model.flow_net)
    w_lat = model.flow_codec.encoder(f)
    w_ste, w_bits = model.flow_codec.em.training_pass(w_lat, noise_gen)
    f_hat = model.flow_codec.decode(w_ste, (x_next.shape[-2], x_next.shape[-1]))
    x_warp = warp(x_prev_ref, f_hat)
    x_pred = model.mc_net(x_prev_ref, x_warp, f_hat)
    out = {"f": f, "w_bits": w_bits, "f_hat": f_hat, "x_warp": x_warp, "x_pred": x_pred}
    if not with_residual:
        return out
    with torch.no_grad():
        y_next = _encode_grad(x_next, teacher)
    y_pred = _encode_grad(x_pred, teacher)
    r = latent_residual(y_next, y_pred)
    r_ste, r_bits = model.residual_em.training_pass(r, noise_gen)
    y_hat_next = reconstruct_latent(r_ste, y_pred)
    x_hat_next = _decode_grad(y_hat_next, teacher, rn)
    out.update(
        y_next=y_next, y_pred=y_pred, r_bits=r_bits, y_hat_next=y_hat_next, x_hat_next=x_hat_next
    )
    return out


def train_video(
    dataset,
    teacher: TeacherModel,
    config: VideoConfig,
    decoder_choice: str = "teacher",
    bundle: WeightBundle | None = None,
    log=None,
    on_phase_end=None,
) -> VideoModel:
    """Four-phase training of the frame-prediction and residual-coding networks.

    Phase 1 trains flow estimation and flow compression, phase 2 the motion
    compensation, phase 3 adds the residual entropy model, and phase 4
    optimizes a multi-frame rollout. The image encoder and its entropy model
    are frozen throughout; ``on_phase_end(phase_index, model)`` is invoked
    after each phase, e.g. to snapshot checkpoints.
    """
    if decoder_choice not in ("teacher", "student"):
        raise ConfigError("decoder_choice must be 'teacher' or 'student'")
    rn = None
    if decoder_choice == "student":
        if bundle is None:
            raise ConfigError("student decoder choice needs a weight bundle")
        rn = unpack_weight_bundle(bundle)
        rn.eval()
        rn.requires_grad_(False)

    sequences = _gather_sequences(dataset)
    model = VideoModel(teacher, config)
    model.train()
    batcher = _VideoBatcher(sequences, teacher, config.crop, config.seed)
    noise_gen = seeded_generator(config.seed + 17)

    fpn_params = list(model.flow_net.parameters()) + list(model.flow_codec.parameters())
    phase_params = [
        fpn_params,
        list(model.mc_net.parameters()),
        fpn_params + list(model.mc_net.parameters()) + list(model.residual_em.parameters()),
        fpn_params + list(model.mc_net.parameters()) + list(model.residual_em.parameters()),
    ]

    for phase in range(4):
        opt = torch.optim.Adam(phase_params[phase], lr=config.lr)
        span = config.n_frames if phase == 3 else 1
        for step in range(1, config.phase_steps[phase] + 1):
            xs, recs = batcher.sample(config.batch, span)
            if phase == 0:
                t = _p_transition_train(model, teacher, recs[0], xs[1], noise_gen, rn, False)
                loss = loss_warp(xs[1], t["x_warp"], t["w_bits"], config.lambda_w)
            elif phase == 1:
                t = _p_transition_train(model, teacher, recs[0], xs[1], noise_gen, rn, False)
                with torch.no_grad():
                    y_next = _encode_grad(xs[1], teacher)
                y_pred = _encode_grad(t["x_pred"], teacher)
                loss = loss_mc(
                    xs[1], t["x_pred"], y_next, y_pred, t["w_bits"], config.lambda_w, config.k_mse
                )
            elif phase == 2:
                t = _p_transition_train(model, teacher, recs[0], xs[1], noise_gen, rn, True)
                loss = loss_step(
                    xs[1],
                    recs[1],
                    t["x_hat_next"],
                    t["w_bits"],
                    t["r_bits"],
                    config.lambda_w,
                    config.k_mse,
                    config.k_perceptual,
                    d_p_seed=config.seed,
                )
            else:
                x_prev = recs[0]
                terms = []
                for k in range(1, span + 1):
                    t = _p_transition_train(model, teacher, x_prev, xs[k], noise_gen, rn, True)
                    terms.append((xs[k], recs[k], t["x_hat_next"], t["w_bits"], t["r_bits"]))
                    x_prev = t["x_hat_next"].clamp(0.0, 1.0)
                loss = loss_final(
                    terms, config.lambda_final, config.k_mse, config.k_perceptual, d_p_seed=config.seed
                )

            opt.zero_grad()
            loss.backward()
            opt.step()
            if log is not None and (step % config.log_every == 0 or step == config.phase_steps[phase]):
                log(f"phase={phase + 1} step={step} total={float(loss):.6f}")
        if on_phase_end is not None:
            on_phase_end(phase, model)

    model.eval()
    model.requires_grad_(False)
    return model


# ---------------------------------------------------------------------------
# GOP encode / decode


class _LoadCounter:
    def __init__(self):
        self.value = 0


bundle_load_counter = _LoadCounter()


def _latent_shape(teacher: TeacherModel, height: int, width: int) -> tuple[int, int, int]:
    s = teacher.config.downsample_factor
    return (teacher.config.latent_channels, math.ceil(height / s), math.ceil(width / s))


def _flow_latent_shape(model: VideoModel, height: int, width: int) -> tuple[int, int, int]:
    return (model.config.flow_channels, math.ceil(height / 16), math.ceil(width / 16))


def _p_frame_crank(model, teacher, x_prev_ref, f_hat, size):
    """Deterministic prediction shared by encoder and decoder."""
    with torch.no_grad():
        x_warp = warp(x_prev_ref, f_hat)
        x_pred = model.mc_net(x_prev_ref, x_warp, f_hat)
        y_pred = encode(x_pred, teacher)
    return y_pred


def encode_gop(
    frames,
    video_model: VideoModel,
    gop: int = 10,
    bundle: WeightBundle | None = None,
    radius: int = DEFAULT_SUPPORT_RADIUS,
    zero_residuals: bool = False,
    return_recons: bool = False,
):
    """Encode a frame sequence into an MDV1 bitstream of I + P frame groups.

    ``zero_residuals`` codes all-zero latent residuals (a diagnostic lower
    bound on residual rate). ``return_recons`` additionally returns the
    encoder-side reference reconstructions for closed-loop verification.
    """
    frame_list = frames.frames if hasattr(frames, "frames") else list(frames)
    if not frame_list:
        raise DataError("cannot encode an empty sequence")
    if gop < 1:
        raise ConfigError("gop must be >= 1")
    teacher = video_model.teacher
    h, w = frame_list[0].shape[-2:]
    size = (h, w)
    gops = []
    recons: list[Tensor] = []
    with torch.no_grad():
        for start in range(0, len(frame_list), gop + 1):
            chunk = frame_list[start : start + gop + 1]
            y = encode(chunk[0].unsqueeze(0), teacher)
            y_hat, i_z, i_y = encode_latent(y, teacher.entropy_model, radius)
            x_ref = decode_full(y_hat, teacher, size=size)
            recons.append(x_ref.squeeze(0))
            p_payloads = []
            for x_next in chunk[1:]:
                xb = x_next.unsqueeze(0)
                f = estimate_flow(xb, x_ref, video_model.flow_net)
                w_lat = video_model.flow_codec.encoder(f)
                w_hat, flow_z, flow_w = encode_latent(w_lat, video_model.flow_codec.em, radius)
                f_hat = video_model.flow_codec.decode(w_hat, size)
                y_pred = _p_frame_crank(video_model, teacher, x_ref, f_hat, size)
                y_next = encode(xb, teacher)
                r = latent_residual(y_next, y_pred)
                if zero_residuals:
                    r = torch.zeros_like(r)
                r_hat, res_z, res_r = encode_latent(r, video_model.residual_em, radius)
                y_hat_next = reconstruct_latent(r_hat, y_pred)
                x_ref = decode_full(y_hat_next, teacher, size=size)
                recons.append(x_ref.squeeze(0))
                p_payloads.append(
                    PFramePayload(flow_z=flow_z, flow_w=flow_w, res_z=res_z, res_r=res_r)
                )
            gops.append(GOPPayload(i_z=i_z, i_y=i_y, p_frames=tuple(p_payloads)))

    stream = GOPBitstream(
        width=w,
        height=h,
        num_frames=len(frame_list),
        gop=gop,
        model_id=weights_crc32(video_model, teacher),
        support_radius=radius,
        gops=tuple(gops),
        bundle=bundle,
    )
    if return_recons:
        return stream, recons
    return stream


def decode_gop(
    bitstream: GOPBitstream,
    video_model: VideoModel,
    weight_bundle: WeightBundle | None = None,
) -> list[Tensor]:
    """Reconstruct all frames of an MDV1 bitstream.

    The reference chain always runs through the model's fixed decoder; the
    optional weight bundle (argument wins over an embedded one) only selects
    the decoder that renders output frames, and is loaded exactly once.
    """
    teacher = video_model.teacher
    if bitstream.model_id != weights_crc32(video_model, teacher):
        raise CorruptStreamError("bitstream was produced by a different model")
    bundle = weight_bundle if weight_bundle is not None else bitstream.bundle
    rn = None
    if bundle is not None:
        if bundle.config.io_channels != teacher.config.trunk_channels:
            raise IncompatibleBundleError(
                f"bundle width {bundle.config.io_channels} does not match "
                f"decoder trunk width {teacher.config.trunk_channels}"
            )
        rn = unpack_weight_bundle(bundle)
        rn.eval()
        bundle_load_counter.value += 1

    h, w = bitstream.height, bitstream.width
    size = (h, w)
    radius = bitstream.support_radius
    y_shape = _latent_shape(teacher, h, w)
    w_shape = _flow_latent_shape(video_model, h, w)
    frames: list[Tensor] = []
    with torch.no_grad():
        for g in bitstream.gops:
            y_hat = decode_latent(g.i_z, g.i_y, teacher.entropy_model, y_shape, radius)
            x_ref = decode_full(y_hat, teacher, size=size)
            frames.append(
                student_decode(y_hat, teacher, rn, size=size).squeeze(0)
                if rn is not None
                else x_ref.squeeze(0)
            )
            for p in g.p_frames:
                w_hat = decode_latent(p.flow_z, p.flow_w, video_model.flow_codec.em, w_shape, radius)
                f_hat = video_model.flow_codec.decode(w_hat, size)
                y_pred = _p_frame_crank(video_model, teacher, x_ref, f_hat, size)
                r_hat = decode_latent(p.res_z, p.res_r, video_model.residual_em, y_shape, radius)
                y_hat_next = reconstruct_latent(r_hat, y_pred)
                x_ref = decode_full(y_hat_next, teacher, size=size)
                frames.append(
                    student_decode(y_hat_next, teacher, rn, size=size).squeeze(0)
                    if rn is not None
                    else x_ref.squeeze(0)
                )
    return frames


# ---------------------------------------------------------------------------
# Checkpoint round-trip


def save_video_model(model: VideoModel) -> bytes:
    from .bitstream import write_checkpoint

    records = {k: v.detach().cpu().numpy().astype(np.float32) for k, v in model.state_dict().items()}
    cfg = {
        "kind": "video",
        "video": config_to_dict(model.config),
        "teacher_crc": weights_crc32(model.teacher),
    }
    return write_checkpoint(cfg, records)


def load_video_model(data: bytes, teacher: TeacherModel) -> VideoModel:
    from .bitstream import read_checkpoint

    cfg, records = read_checkpoint(data)
    if cfg.get("kind") != "video":
        raise DataError(f"checkpoint holds a {cfg.get('kind')!r} model, expected video")
    if cfg.get("teacher_crc") != weights_crc32(teacher):
        raise IncompatibleBundleError("video checkpoint was trained against a different teacher")
    model = VideoModel(teacher, config_from_dict("video", cfg["video"]))
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in records.items()})
    model.eval()
    model.requires_grad_(False)
    return model
