"""A desk-scale diffusion transformer with STDiT-style feature modulation.

The model is not trained. Its noise prediction is the exact posterior
denoiser of a per-token Gaussian prior centred on a seeded "video" (a
Gaussian-mixture sample with drifting content), plus a residual produced by
a stack of transformer blocks. Only the blocks' linear layers are quantized;
the patch embedding, final projection, time-embedding MLP and the attention
math itself stay in float64.

Each block modulates its normalised input per channel with
``scale_shift_table + t_mlp(t)`` before self attention, temporal attention
and the FFN. The table is drawn heavy-tailed (log-normal magnitudes) so a few
channels dominate from the first step, and a handful of ``t_mlp`` output rows
carry a large gain so channel imbalance also moves with the timestep.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Callable, Protocol

import numpy as np

COND = 1
UNCOND = 0

# modulation slots in scale_shift_table / t_mlp output
MOD_SLOTS = ("shift_msa", "scale_msa", "shift_tmp", "scale_tmp", "shift_mlp", "scale_mlp")
MOD_PAIRS = {"msa": (0, 1), "tmp": (2, 3), "mlp": (4, 5)}

LAYER_TYPES = {
    "self_attn.qkv": "SelfAttnQKV",
    "self_attn.proj": "SelfAttnProj",
    "cross_attn.q": "CrossAttnQKV",
    "cross_attn.kv": "CrossAttnQKV",
    "cross_attn.proj": "CrossAttnProj",
    "temporal_attn.qkv": "TemporalAttnQKV",
    "temporal_attn.proj": "TemporalAttnProj",
    "ffn.fc1": "FFN1",
    "ffn.fc2": "FFN2",
}
# layers whose input is the output of a feature modulation, and which slot
MODULATED = {"self_attn.qkv": "msa", "temporal_attn.qkv": "tmp", "ffn.fc1": "mlp"}


def layer_type(name: str) -> str:
    """``"blocks.1.ffn.fc1"`` -> ``"FFN1"``."""
    return LAYER_TYPES[name.split(".", 2)[2]]


@dataclass(frozen=True)
class ToyConfig:
    width: int = 64
    tokens: int = 16
    frames: int = 4
    depth: int = 2
    heads: int = 4
    pixel_dim: int = 4
    ctx_tokens: int = 8
    time_dim: int = 32
    t_hidden: int = 64
    ffn_mult: int = 2
    seed: int = 0
    # heavy-tailed scale_shift_table: |entry| = exp(N(mu, sigma)), random sign
    scale_log_mu: float = -1.5
    scale_log_sigma: float = 1.0
    shift_log_mu: float = -1.0
    shift_log_sigma: float = 1.8
    # t_mlp rows with a large gain produce time-varying outlier channels;
    # they read one hidden unit that ramps from ~0 (t = T) to ``ramp`` (t = 0)
    dyn_channels: int = 2
    dyn_gain: float = 25.0
    t_gain: float = 0.1
    ramp: float = 2.0
    center_queries: bool = True
    quality_branch_gain: float = 0.5
    train_steps: int = 1000
    # modulated layers' weight columns shrink by |1 + table_scale|**compensation
    compensation: float = 0.0
    # denoiser
    residual_gain: float = 0.1
    prior_std: float = 0.5
    mixture_components: int = 3
    guidance: float = 4.0

    def validate(self) -> None:
        w = self.width
        if w < 16 or w & (w - 1):
            raise ValueError(f"width must be a power of two >= 16, got {w}")
        if self.tokens < 4:
            raise ValueError("tokens must be >= 4")
        if self.frames < 2:
            raise ValueError("frames must be >= 2")
        if self.depth < 1 or w % self.heads:
            raise ValueError("depth >= 1 and heads dividing width required")
        hidden = w * self.ffn_mult
        if hidden & (hidden - 1):
            raise ValueError("FFN hidden width must be a power of two")


@dataclass
class ToyBlock:
    """Weights of one transformer block. ``layers`` maps local names to ``[C_out, C_in]``."""

    layers: dict[str, np.ndarray]
    scale_shift_table: np.ndarray  # [6, C]
    t_mlp: tuple[np.ndarray, np.ndarray]  # [t_hidden, time_dim], [6C, t_hidden]


@dataclass
class ToyDiT:
    config: ToyConfig
    blocks: list[ToyBlock]
    embed: np.ndarray  # [C, P]
    pos_embed: np.ndarray  # [T, C]
    frame_embed: np.ndarray  # [F, C]
    final: np.ndarray  # [P, C]
    context: np.ndarray  # [ctx, C]
    null_context: np.ndarray  # [ctx, C]
    content: np.ndarray  # [F, T, P] prior means

    def layer_names(self) -> list[str]:
        return [f"blocks.{i}.{n}" for i in range(len(self.blocks)) for n in LAYER_TYPES]

    def weight(self, name: str) -> np.ndarray:
        _, idx, local = name.split(".", 2)
        return self.blocks[int(idx)].layers[local]

    def layer_shapes(self) -> dict[str, tuple[int, int]]:
        return {n: self.weight(n).shape for n in self.layer_names()}

    def digest(self) -> str:
        """SHA-256 over every array, in a fixed order."""
        h = hashlib.sha256()
        arrays = [self.embed, self.pos_embed, self.frame_embed, self.final,
                  self.context, self.null_context, self.content]
        for b in self.blocks:
            arrays += [b.layers[k] for k in LAYER_TYPES] + [b.scale_shift_table, *b.t_mlp]
        for a in arrays:
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        return h.hexdigest()

    def with_blocks(self, fn: Callable[[ToyBlock], ToyBlock]) -> "ToyDiT":
        return replace(self, blocks=[fn(b) for b in self.blocks])


def _normal(rng, shape, std):
    return rng.standard_normal(shape) * std


def _heavy(rng, shape, mu, sigma):
    return rng.choice(np.array([-1.0, 1.0]), size=shape) * np.exp(rng.normal(mu, sigma, size=shape))


def _build_block(rng, cfg: ToyConfig) -> ToyBlock:
    c = cfg.width
    h = c * cfg.ffn_mult
    layers = {
        "self_attn.qkv": _normal(rng, (3 * c, c), 1 / np.sqrt(c)),
        "self_attn.proj": _normal(rng, (c, c), cfg.quality_branch_gain / np.sqrt(c)),
        "cross_attn.q": _normal(rng, (c, c), 1 / np.sqrt(c)),
        "cross_attn.kv": _normal(rng, (2 * c, c), 1 / np.sqrt(c)),
        "cross_attn.proj": _normal(rng, (c, c), 0.5 / np.sqrt(c)),
        "temporal_attn.qkv": _normal(rng, (3 * c, c), 1 / np.sqrt(c)),
        "temporal_attn.proj": _normal(rng, (c, c), 0.5 / np.sqrt(c)),
        "ffn.fc1": _normal(rng, (h, c), 1 / np.sqrt(c)),
        "ffn.fc2": _normal(rng, (c, h), cfg.quality_branch_gain / np.sqrt(h)),
    }
    table = np.empty((6, c))
    table[0::2] = _heavy(rng, (3, c), cfg.shift_log_mu, cfg.shift_log_sigma)
    table[1::2] = _heavy(rng, (3, c), cfg.scale_log_mu, cfg.scale_log_sigma)
    w1 = _normal(rng, (cfg.t_hidden, cfg.time_dim), 1 / np.sqrt(cfg.time_dim))
    w2 = _normal(rng, (6 * c, cfg.t_hidden), cfg.t_gain / np.sqrt(cfg.t_hidden))
    # hidden unit 0 sees only the slowest sinusoid pair, which is near-linear in t
    half = cfg.time_dim // 2
    f_low = np.exp(-np.log(10000.0) * (half - 1) / half)
    w1[0] = 0.0
    w1[0, half - 1] = cfg.ramp
    w1[0, -1] = -2.0 * cfg.ramp / (f_low * cfg.train_steps)
    for slot in range(6):
        rows = rng.choice(c, size=cfg.dyn_channels, replace=False)
        w2[slot * c + rows] = 0.0
        w2[slot * c + rows, 0] = cfg.dyn_gain * rng.choice(np.array([-1.0, 1.0]), size=cfg.dyn_channels)
    for name, slot in MODULATED.items():
        gain = np.abs(1.0 + table[MOD_PAIRS[slot][1]]) + np.abs(table[MOD_PAIRS[slot][0]])
        layers[name] = layers[name] / np.maximum(gain, 1.0) ** cfg.compensation
    return ToyBlock(layers, table, (w1, w2))


def _build_content(rng, cfg: ToyConfig) -> np.ndarray:
    """Gaussian-mixture frames whose component layout drifts one token per frame."""
    k = cfg.mixture_components
    means = rng.normal(0.0, 1.5, size=(k, cfg.pixel_dim))
    labels = rng.integers(0, k, size=cfg.tokens)
    jitter = rng.normal(0.0, 0.3, size=(cfg.frames, cfg.tokens, cfg.pixel_dim))
    frames = [means[np.roll(labels, f)] for f in range(cfg.frames)]
    return np.stack(frames) + jitter


def build_toy_model(width: int = 64, tokens: int = 16, frames: int = 4, seed: int = 0, **overrides) -> ToyDiT:
    cfg = ToyConfig(width=width, tokens=tokens, frames=frames, seed=seed, **overrides)
    cfg.validate()
    rng = np.random.default_rng(seed)
    c, p = cfg.width, cfg.pixel_dim
    blocks = [_build_block(rng, cfg) for _ in range(cfg.depth)]
    return ToyDiT(
        config=cfg,
        blocks=blocks,
        embed=_normal(rng, (c, p), 1 / np.sqrt(p)),
        pos_embed=_normal(rng, (cfg.tokens, c), 0.5),
        frame_embed=_normal(rng, (cfg.frames, c), 0.5),
        final=_normal(rng, (p, c), 1 / np.sqrt(c)),
        context=_normal(rng, (cfg.ctx_tokens, c), 1.0),
        null_context=_normal(rng, (cfg.ctx_tokens, c), 0.1),
        content=_build_content(rng, cfg),
    )


# ---------------------------------------------------------------------------
# forward pieces


def timestep_embedding(t: float, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = t * freqs
    return np.concatenate([np.cos(args), np.sin(args)])


def _silu(x):
    return x / (1.0 + np.exp(-x))


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(0.7978845608028654 * (x + 0.044715 * x**3)))


def _layer_norm(x, eps=1e-6):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def _softmax(x):
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)


def _attention(q, k, v, heads, center: bool = False):
    """Batched multi-head attention; ``q`` is ``[B, Lq, C]``, ``k``/``v`` ``[B, Lk, C]``.

    ``center`` subtracts the mean query over the sequence, so a component
    shared by every position (e.g. a large modulation shift) cannot make all
    queries pick the same key.
    """
    if center:
        q = q - q.mean(axis=1, keepdims=True)
    b, lq, c = q.shape
    lk = k.shape[1]
    d = c // heads
    q = q.reshape(b, lq, heads, d).transpose(0, 2, 1, 3)
    k = k.reshape(b, lk, heads, d).transpose(0, 2, 1, 3)
    v = v.reshape(b, lk, heads, d).transpose(0, 2, 1, 3)
    w = _softmax(q @ k.transpose(0, 1, 3, 2) / np.sqrt(d))
    return (w @ v).transpose(0, 2, 1, 3).reshape(b, lq, c)


def modulation(block: ToyBlock, t: float, time_dim: int, with_time: bool = True) -> np.ndarray:
    """Per-channel ``[6, C]`` modulation: table plus (optionally) the time-embedding MLP."""
    if not with_time:
        return block.scale_shift_table
    w1, w2 = block.t_mlp
    e = _silu(w1 @ timestep_embedding(t, time_dim))
    return block.scale_shift_table + (w2 @ e).reshape(6, -1)


def modulate(x: np.ndarray, block: ToyBlock, t: float, slot: str = "msa", time_dim: int = 32) -> np.ndarray:
    """``x * (1 + scale(t)) + shift(t)`` for one of the ``msa``/``tmp``/``mlp`` slots."""
    mod = modulation(block, t, time_dim)
    i_shift, i_scale = MOD_PAIRS[slot]
    return x * (1.0 + mod[i_scale]) + mod[i_shift]


# ---------------------------------------------------------------------------
# traces and runs


@dataclass(frozen=True)
class ActivationTrace:
    """One recorded linear-layer input. ``X`` is float32 and treated as immutable."""

    layer_name: str
    timestep: int
    condition: int
    X: np.ndarray

    @property
    def is_static(self) -> bool:
        return self.layer_name.endswith(":static")


class LinearHook(Protocol):
    def apply(self, name: str, step: int, x: np.ndarray, w: np.ndarray) -> np.ndarray: ...


@dataclass
class DenoiseRun:
    steps: int
    cfg: bool
    seed: int
    trajectory: np.ndarray  # [steps + 1, F, T, P]
    cross_outputs: np.ndarray  # [steps, depth, F*T, C], conditional branch
    temporal_outputs: np.ndarray  # [steps, depth, F*T, C], conditional branch, frame-major rows
    traces: list[ActivationTrace] = field(default_factory=list)

    @property
    def output(self) -> np.ndarray:
        return self.trajectory[-1]

    def with_output(self, frames: np.ndarray) -> "DenoiseRun":
        traj = self.trajectory.copy()
        traj[-1] = frames
        return replace(self, trajectory=traj)


def alpha_bar_schedule(n_train: int = 1000) -> np.ndarray:
    betas = np.linspace(1e-4, 0.02, n_train)
    return np.cumprod(1.0 - betas)


def sampling_timesteps(steps: int, n_train: int = 1000) -> np.ndarray:
    return np.linspace(n_train - 1, 0, steps).round().astype(int)


class _Forward:
    def __init__(self, model: ToyDiT, quant: LinearHook | None, record: bool):
        self.model = model
        self.cfg = model.config
        self.quant = quant
        self.record = record
        self.traces: list[ActivationTrace] = []

    def linear(self, name, x, step, cond):
        w = self.model.weight(name)
        if self.record:
            self.traces.append(ActivationTrace(name, step, cond, x.astype(np.float32)))
        if self.quant is None:
            return x @ w.T
        return self.quant.apply(name, step, x, w)

    def record_static(self, name, x_norm, block, slot, step, cond):
        if not self.record:
            return
        i_shift, i_scale = MOD_PAIRS[slot]
        tab = block.scale_shift_table
        base = x_norm * (1.0 + tab[i_scale]) + tab[i_shift]
        self.traces.append(ActivationTrace(name + ":static", step, cond, base.astype(np.float32)))

    def block(self, i, block, h, t, step, cond, probes):
        cfg = self.cfg
        f, n, c = h.shape
        pre = f"blocks.{i}."
        mod = modulation(block, t, cfg.time_dim)
        ctx = self.model.context if cond == COND else self.model.null_context

        hn = _layer_norm(h).reshape(-1, c)
        a = hn * (1.0 + mod[1]) + mod[0]
        self.record_static(pre + "self_attn.qkv", hn, block, "msa", step, cond)
        qkv = self.linear(pre + "self_attn.qkv", a, step, cond).reshape(f, n, 3 * c)
        o = _attention(qkv[..., :c], qkv[..., c:2 * c], qkv[..., 2 * c:], cfg.heads, cfg.center_queries).reshape(-1, c)
        h = h + self.linear(pre + "self_attn.proj", o, step, cond).reshape(f, n, c)

        q = self.linear(pre + "cross_attn.q", _layer_norm(h).reshape(-1, c), step, cond)
        kv = self.linear(pre + "cross_attn.kv", ctx, step, cond)
        k = np.broadcast_to(kv[:, :c], (f,) + kv[:, :c].shape)
        v = np.broadcast_to(kv[:, c:], (f,) + kv[:, c:].shape)
        o = _attention(q.reshape(f, n, c), k, v, cfg.heads, cfg.center_queries).reshape(-1, c)
        cross = self.linear(pre + "cross_attn.proj", o, step, cond)
        if probes is not None:
            probes["cross"].append(cross)
        h = h + cross.reshape(f, n, c)

        hn = _layer_norm(h).reshape(-1, c)
        a = hn * (1.0 + mod[3]) + mod[2]
        self.record_static(pre + "temporal_attn.qkv", hn, block, "tmp", step, cond)
        qkv = self.linear(pre + "temporal_attn.qkv", a, step, cond).reshape(f, n, 3 * c)
        qkv = qkv.transpose(1, 0, 2)  # attend across frames per token position
        o = _attention(qkv[..., :c], qkv[..., c:2 * c], qkv[..., 2 * c:], cfg.heads, cfg.center_queries)
        o = o.transpose(1, 0, 2).reshape(-1, c)
        tmp = self.linear(pre + "temporal_attn.proj", o, step, cond)
        if probes is not None:
            probes["temporal"].append(tmp)
        h = h + tmp.reshape(f, n, c)

        hn = _layer_norm(h).reshape(-1, c)
        a = hn * (1.0 + mod[5]) + mod[4]
        self.record_static(pre + "ffn.fc1", hn, block, "mlp", step, cond)
        u = _gelu(self.linear(pre + "ffn.fc1", a, step, cond))
        h = h + self.linear(pre + "ffn.fc2", u, step, cond).reshape(f, n, c)
        return h

    def net(self, x, t, step, cond, probes=None):
        m = self.model
        h = x @ m.embed.T + m.pos_embed[None] + m.frame_embed[:, None]
        for i, b in enumerate(m.blocks):
            h = self.block(i, b, h, t, step, cond, probes)
        return _layer_norm(h) @ m.final.T


def prior_eps(model: ToyDiT, x: np.ndarray, alpha_bar: float) -> np.ndarray:
    """Exact noise prediction for ``x0 ~ N(content, prior_std**2)`` per element."""
    var0 = model.config.prior_std**2
    sa = np.sqrt(alpha_bar)
    mean_xt = sa * model.content
    var_xt = alpha_bar * var0 + (1.0 - alpha_bar)
    x0_hat = model.content + (sa * var0 / var_xt) * (x - mean_xt)
    return (x - sa * x0_hat) / np.sqrt(1.0 - alpha_bar)


def run_denoise(
    model: ToyDiT,
    steps: int = 20,
    cfg: bool = True,
    quant: LinearHook | None = None,
    seed: int = 0,
    record_traces: bool = False,
) -> DenoiseRun:
    """Deterministic DDIM sampling. ``quant=None`` is the float reference.

    Steps are indexed ``0..steps-1`` in sampling order (noisiest first); that
    index is what traces, timestep ranges and plans refer to.
    """
    if steps < 4 or steps % 4:
        raise ValueError(f"steps must be a positive multiple of 4, got {steps}")
    c = model.config
    fwd = _Forward(model, quant, record_traces)
    abar = alpha_bar_schedule()
    ts = sampling_timesteps(steps)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((c.frames, c.tokens, c.pixel_dim))
    traj = [x]
    cross_steps, temporal_steps = [], []
    for step, t in enumerate(ts):
        a_t = abar[t]
        a_prev = abar[ts[step + 1]] if step + 1 < steps else 1.0
        probes: dict[str, list[np.ndarray]] = {"cross": [], "temporal": []}
        r_c = fwd.net(x, float(t), step, COND, probes)
        if cfg:
            r_u = fwd.net(x, float(t), step, UNCOND)
            r = r_u + c.guidance * (r_c - r_u)
        else:
            r = r_c
        cross_steps.append(np.stack(probes["cross"]))
        temporal_steps.append(np.stack(probes["temporal"]))
        eps = prior_eps(model, x, a_t) + c.residual_gain * r
        x0 = (x - np.sqrt(1.0 - a_t) * eps) / np.sqrt(a_t)
        x = np.sqrt(a_prev) * x0 + np.sqrt(1.0 - a_prev) * eps
        traj.append(x)
    return DenoiseRun(steps, cfg, seed, np.stack(traj), np.stack(cross_steps),
                      np.stack(temporal_steps), fwd.traces)


# ---------------------------------------------------------------------------
# variation statistics


def _cv(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    m = v.mean()
    return float(v.std() / m) if m > 0 else 0.0


@dataclass(frozen=True)
class VariationReport:
    """Coefficients of variation of group absmax along each data dimension.

    ``None`` means the dimension is not observable in the trace set.
    """

    token: float | None
    condition: float | None
    timestep: float | None
    channel: float | None

    def as_dict(self) -> dict[str, float | None]:
        return {"token": self.token, "condition": self.condition,
                "timestep": self.timestep, "channel": self.channel}


def variation_stats(traces: list[ActivationTrace]) -> VariationReport:
    """Token/condition/timestep/channel variation of activation magnitudes.

    * token: CV of per-row absmax inside each trace
    * channel: CV of per-column absmax inside each trace
    * timestep: CV across steps of a trace's absmax, per (layer, condition)
    * condition: CV across conditions of a trace's absmax, per (layer, step)

    Each is averaged over the traces or keys where it is defined.
    """
    traces = [t for t in traces if not t.is_static]
    if not traces:
        raise ValueError("variation_stats needs at least one trace")
    token = [_cv(np.abs(t.X).max(axis=1)) for t in traces]
    channel = [_cv(np.abs(t.X).max(axis=0)) for t in traces]
    by_lc: dict = {}
    by_ls: dict = {}
    for t in traces:
        amax = float(np.abs(t.X).max())
        by_lc.setdefault((t.layer_name, t.condition), {})[t.timestep] = amax
        by_ls.setdefault((t.layer_name, t.timestep), {})[t.condition] = amax
    ts = [_cv(list(v.values())) for v in by_lc.values() if len(v) > 1]
    cs = [_cv(list(v.values())) for v in by_ls.values() if len(v) > 1]
    return VariationReport(
        token=float(np.mean(token)),
        condition=float(np.mean(cs)) if cs else None,
        timestep=float(np.mean(ts)) if ts else None,
        channel=float(np.mean(channel)),
    )
