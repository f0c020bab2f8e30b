"""Adversarial training: losses, penalties and the alternating update loop."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import torch

from mp3restore.model import (ArchConfig, Critic, Generator, build_models, load_checkpoint, save_checkpoint,
                              tiny_arch)
from mp3restore.spectral import signed_square

logger = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "gamma", "gp", "drift", "l_freq", "l_rhyt", "wall_ms")
PROFILE_EPS = 1e-8
# keeps sqrt differentiable where a bin is exactly zero
ROOT_POWER_EPS = 1e-20


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 12
    iterations: int = 40000
    gp_coeff: float = 10.0
    drift_coeff: float = 1e-3
    theta: float = 1.0
    p_freq: float = 1.3
    p_rhyt: float = 1.6
    critic_steps_per_gen_step: int = 1
    beta1: float = 0.0
    beta2: float = 0.9
    seed: int = 0
    stochastic: bool = True
    bitrate: int = 16000
    arch: str = "full"
    segment_frames: int = 336
    checkpoint_every: int = 1000
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("lr", "gp_coeff", "drift_coeff", "theta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.p_freq <= 1 or self.p_rhyt <= 1:
            raise ValueError("profile exponents must exceed 1")
        if self.batch_size < 1 or self.critic_steps_per_gen_step < 1 or self.iterations < 0:
            raise ValueError("batch_size, critic steps and iterations must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")

    def arch_config(self) -> ArchConfig:
        if self.arch == "full":
            return ArchConfig(stochastic=self.stochastic)
        if self.arch == "tiny":
            return tiny_arch(stochastic=self.stochastic)
        raise ValueError(f"unknown arch preset {self.arch!r}")

    @property
    def torch_dtype(self):
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]

    # flat "key = value" file, values JSON-encoded
    def dump(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(f"{k} = {json.dumps(v)}\n" for k, v in asdict(self).items()))
        return path

    @classmethod
    def load(cls, path, **overrides) -> "TrainConfig":
        values = parse_config_file(path)
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"{path}: unknown config keys {sorted(unknown)}")
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


def parse_config_file(path) -> dict:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


# ---------------------------------------------------------------------------
# losses


def wasserstein_loss(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    """Batch mean of ``d_real - d_fake``; the critic maximises it."""
    return torch.mean(d_real - d_fake)


def critic_value(D, candidate, mp3) -> torch.Tensor:
    """Per-instance critic value: per-frame scores averaged over frames."""
    scores = D(candidate, mp3)
    return scores.reshape(scores.shape[0], -1).mean(dim=1)


def gradient_penalty(D, x_real, x_fake, mp3, seed=None, generator: torch.Generator | None = None,
                     create_graph: bool = True) -> torch.Tensor:
    """Mean of ``(||grad D(x_interp)||_2 - 1)^2`` over the batch (unscaled).

    ``x_interp = eps * x_real + (1 - eps) * x_fake`` with one ``eps ~ U(0, 1)``
    per instance.
    """
    if generator is None:
        generator = torch.Generator().manual_seed(0 if seed is None else int(seed))
    b = x_real.shape[0]
    eps = torch.rand((b,) + (1,) * (x_real.ndim - 1), generator=generator).to(x_real.dtype)
    x_hat = (eps * x_real.detach() + (1 - eps) * x_fake.detach()).requires_grad_(True)
    d = critic_value(D, x_hat, mp3)
    (grad,) = torch.autograd.grad(d.sum(), x_hat, create_graph=create_graph)
    norms = grad.reshape(b, -1).norm(dim=1)
    if not torch.all(torch.isfinite(norms)):
        raise TrainingAborted("non-finite critic gradients in gradient penalty")
    return torch.mean((norms - 1.0) ** 2)


def drift_penalty(d_real: torch.Tensor, coeff: float = 1e-3) -> torch.Tensor:
    return coeff * torch.mean(d_real ** 2)


def output_root_power(out: torch.Tensor) -> torch.Tensor:
    """``|h|`` of generator output given in signed square-root scaling, ``(B, F, T)``."""
    lin = signed_square(out)
    return torch.sqrt(lin[:, 0] ** 2 + lin[:, 1] ** 2 + ROOT_POWER_EPS)


def profile_loss(out_i, out_j, z_i, z_j, axis: str = "freq", theta: float = 1.0, p: float | None = None,
                 eps: float = PROFILE_EPS) -> torch.Tensor:
    """Noise-distance over profile-distance ratio, averaged over the batch.

    The frequency profile sums root-power over time, the rhythm profile over
    frequency. The ``p``-th power of the ``p``-norm of the profile difference is
    floored at ``eps`` so collapsed outputs give a large but finite penalty.
    """
    if p is None:
        p = {"freq": 1.3, "rhyt": 1.6}[axis]
    if out_i.ndim == 3:
        out_i, out_j = out_i.unsqueeze(0), out_j.unsqueeze(0)
        z_i, z_j = torch.as_tensor(z_i).reshape(1, -1), torch.as_tensor(z_j).reshape(1, -1)
    dim = {"freq": 2, "rhyt": 1}[axis]
    prof_i = output_root_power(out_i).sum(dim=dim)
    prof_j = output_root_power(out_j).sum(dim=dim)
    denom = (torch.abs(prof_i - prof_j) ** p).sum(dim=1).clamp_min(eps)
    num = torch.linalg.vector_norm((z_i - z_j).to(out_i.dtype), dim=1)
    return torch.mean(theta * num / denom)


# ---------------------------------------------------------------------------
# state and update step


def center_crop(x: torch.Tensor, n_frames: int) -> torch.Tensor:
    lo = (x.shape[-1] - n_frames) // 2
    return x[..., lo:lo + n_frames]


@dataclass
class StepLosses:
    step: int
    gamma: float
    gp: float
    drift: float
    l_freq: float
    l_rhyt: float
    wall_ms: float

    def row(self, timing: bool = True) -> str:
        vals = [str(self.step)] + [repr(float(getattr(self, c))) for c in LOSS_COLUMNS[1:-1]]
        vals.append(f"{self.wall_ms:.1f}" if timing else "0")
        return "\t".join(vals)


class TrainState:
    def __init__(self, config: TrainConfig, G: Generator, D: Critic, step: int = 0):
        self.config = config
        self.G, self.D = G, D
        self.step = step
        betas = (float(config.beta1), float(config.beta2))
        self.opt_G = torch.optim.Adam(G.parameters(), lr=config.lr, betas=betas)
        self.opt_D = torch.optim.Adam(D.parameters(), lr=config.lr, betas=betas)
        self.rng = torch.Generator().manual_seed(config.seed + 2)
        self.last_checkpoint: Path | None = None
        self.history: list[StepLosses] = []

    @classmethod
    def fresh(cls, config: TrainConfig) -> "TrainState":
        G, D = build_models(config.arch_config(), config.seed, config.torch_dtype)
        return cls(config, G, D)

    def save(self, path) -> Path:
        path = save_checkpoint(
            path, self.G, self.D, step=self.step, opt_G=self.opt_G.state_dict(), opt_D=self.opt_D.state_dict(),
            rng=self.rng.get_state(), config=asdict(self.config))
        self.last_checkpoint = Path(path)
        return Path(path)

    @classmethod
    def load(cls, path, config: TrainConfig | None = None) -> "TrainState":
        G, D, payload = load_checkpoint(path)
        if D is None:
            raise TrainingAborted(f"{path}: checkpoint has no critic weights, cannot resume")
        config = config or TrainConfig(**payload["config"])
        state = cls(config, G, D, step=payload["step"])
        state.opt_G.load_state_dict(payload["opt_G"])
        state.opt_D.load_state_dict(payload["opt_D"])
        state.rng.set_state(payload["rng"])
        state.last_checkpoint = Path(path)
        return state

    def noise(self, n: int) -> torch.Tensor | None:
        if not self.G.stochastic:
            return None
        return torch.randn((n, self.G.arch.noise_dim), generator=self.rng).to(self.config.torch_dtype)


def _check_finite(state: TrainState, **losses):
    for name, v in losses.items():
        v = float(v.detach()) if torch.is_tensor(v) else float(v)
        if not math.isfinite(v):
            raise TrainingAborted(
                f"step {state.step}: {name} is {v}; last good checkpoint: {state.last_checkpoint}")


def train_step(state: TrainState, batch) -> StepLosses:
    """One round of critic update(s) followed by one generator update."""
    cfg = state.config
    G, D = state.G, state.D
    t0 = time.perf_counter()
    x, y = (b.to(cfg.torch_dtype) for b in batch)
    n = x.shape[0]
    n_out = x.shape[-1] - G.arch.time_shrink
    x_c, y_c = center_crop(x, n_out), center_crop(y, n_out)

    D.requires_grad_(True)
    for _ in range(cfg.critic_steps_per_gen_step):
        with torch.no_grad():
            fake = G(y, state.noise(n), train_mode=True)
        d_real = critic_value(D, x_c, y_c)
        d_fake = critic_value(D, fake, y_c)
        gamma = wasserstein_loss(d_real, d_fake)
        try:
            gp = gradient_penalty(D, x_c, fake, y_c, generator=state.rng)
        except TrainingAborted as e:
            raise TrainingAborted(
                f"step {state.step}: {e}; last good checkpoint: {state.last_checkpoint}") from None
        drift = drift_penalty(d_real, cfg.drift_coeff)
        loss_d = -gamma + cfg.gp_coeff * gp + drift
        _check_finite(state, gamma=gamma, gp=gp, drift=drift)
        state.opt_D.zero_grad(set_to_none=True)
        loss_d.backward()
        state.opt_D.step()

    D.requires_grad_(False)
    if G.stochastic:
        z_i, z_j = state.noise(n), state.noise(n)
        out_i = G(y, z_i, train_mode=True)
        out_j = G(y, z_j, train_mode=True)
        adv = -0.5 * (critic_value(D, out_i, y_c).mean() + critic_value(D, out_j, y_c).mean())
        l_freq = profile_loss(out_i, out_j, z_i, z_j, "freq", cfg.theta, cfg.p_freq)
        l_rhyt = profile_loss(out_i, out_j, z_i, z_j, "rhyt", cfg.theta, cfg.p_rhyt)
        loss_g = adv + l_freq + l_rhyt
    else:
        out = G(y, None, train_mode=True)
        adv = -critic_value(D, out, y_c).mean()
        l_freq = l_rhyt = torch.zeros((), dtype=adv.dtype)
        loss_g = adv
    _check_finite(state, generator_loss=loss_g)
    state.opt_G.zero_grad(set_to_none=True)
    loss_g.backward()
    state.opt_G.step()
    D.requires_grad_(True)

    state.step += 1
    rec = StepLosses(state.step, gamma.item(), gp.item(), drift.item(), l_freq.item(), l_rhyt.item(),
                     1000.0 * (time.perf_counter() - t0))
    state.history.append(rec)
    return rec


# ---------------------------------------------------------------------------
# loop


def loss_log_header(deterministic: bool = True) -> str:
    return (f"# mp3restore loss log v1 deterministic={'true' if deterministic else 'false'}\n"
            + "\t".join(LOSS_COLUMNS) + "\n")


def read_loss_log(path) -> list[dict]:
    lines = [l for l in Path(path).read_text().splitlines() if l and not l.startswith("#")]
    cols = lines[0].split("\t")
    return [dict(zip(cols, (float(v) for v in l.split("\t")))) for l in lines[1:]]


def checkpoint_name(step: int) -> str:
    return f"step_{step:07d}.pt"


def train(config: TrainConfig, batches, out_dir, resume=None, timing: bool = True,
          callback=None) -> TrainState:
    """Run ``config.iterations`` steps (counted from the resumed step).

    ``batches`` needs a ``batch(step)`` method. Writes ``config.txt``,
    ``loss_log.tsv`` and ``checkpoints/step_*.pt`` below ``out_dir``.
    """
    if batches is None or len(batches) == 0:
        raise ValueError("training split is empty")
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    config.dump(out_dir / "config.txt")
    torch.use_deterministic_algorithms(True)
    torch.manual_seed(config.seed)

    if resume:
        state = TrainState.load(resume, config)
        log_path = out_dir / "loss_log.tsv"
        if not log_path.exists():
            log_path.write_text(loss_log_header())
    else:
        state = TrainState.fresh(config)
        log_path = out_dir / "loss_log.tsv"
        log_path.write_text(loss_log_header())
        state.save(ckpt_dir / checkpoint_name(0))

    end = state.step + config.iterations
    with open(log_path, "a") as log:
        while state.step < end:
            rec = train_step(state, batches.batch(state.step))
            log.write(rec.row(timing) + "\n")
            log.flush()
            if callback is not None:
                callback(state, rec)
            if state.step % config.checkpoint_every == 0 or state.step == end:
                state.save(ckpt_dir / checkpoint_name(state.step))
            if state.step % 50 == 0:
                logger.info("step %d gamma %.4f gp %.4f", rec.step, rec.gamma, rec.gp)
    return state


def latest_checkpoint(out_dir) -> Path | None:
    ckpts = sorted((Path(out_dir) / "checkpoints").glob("step_*.pt"))
    return ckpts[-1] if ckpts else None
