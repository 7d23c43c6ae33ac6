"""Alternating Wasserstein training of the attack generator and critic
against a frozen segmenter."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from . import losses, tensorio
from .attacker import AttackerModel, CriticModel, critic_score, generate
from .losses import LossWeights
from .segmenter import SegModel, param_hash

CSV_COLUMNS = ["step", "L_gen", "L_disc", "gen_adv", "target",
               "reg_D", "reg_V", "masked_xent"]


class TrainingCollapse(RuntimeError):
    """Non-finite loss during adversarial training."""

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    rmsprop_decay: float = 0.9
    rmsprop_eps: float = 1e-10
    batch_size: int = 8
    total_steps: int = 500
    critic_steps_per_gen: int = 5
    clip_value: float = 0.01
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.critic_steps_per_gen < 1:
            raise ValueError("critic_steps_per_gen must be >= 1")
        if self.clip_value <= 0:
            raise ValueError("clip_value must be positive")


def rmsprop_step(params, grads, state, lr, decay, eps):
    """One RMSProp update: state <- decay*state + (1-decay)*g^2,
    param <- param - lr*g/sqrt(state + eps). Pure; returns new lists."""
    new_params, new_state = [], []
    for p, g, s in zip(params, grads, state):
        p = torch.as_tensor(p, dtype=torch.float64) if not torch.is_tensor(p) else p
        g = torch.as_tensor(g, dtype=p.dtype) if not torch.is_tensor(g) else g
        s = torch.as_tensor(s, dtype=p.dtype) if not torch.is_tensor(s) else s
        s2 = decay * s + (1 - decay) * g * g
        new_state.append(s2)
        new_params.append(p - lr * g / torch.sqrt(s2 + eps))
    return new_params, new_state


class RMSProp:
    """In-place wrapper around rmsprop_step for a module's parameters."""

    def __init__(self, params, lr, decay, eps):
        self.params = list(params)
        self.lr, self.decay, self.eps = lr, decay, eps
        self.state = [torch.zeros_like(p) for p in self.params]

    def step(self):
        with torch.no_grad():
            for p, s in zip(self.params, self.state):
                if p.grad is None:
                    continue
                s.mul_(self.decay).addcmul_(p.grad, p.grad, value=1 - self.decay)
                p.sub_(self.lr * p.grad / torch.sqrt(s + self.eps))

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def clip_critic(critic: CriticModel, c: float) -> CriticModel:
    """Clamp every critic parameter to [-c, c] (WGAN Lipschitz surrogate)."""
    if c <= 0:
        raise ValueError("clip value must be positive")
    with torch.no_grad():
        for p in critic.parameters():
            p.clamp_(-c, c)
    return critic


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    def to_csv(self, path: str):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(CSV_COLUMNS)
            for row in self.rows:
                w.writerow([row["step"]] + [f"{row[k]:.6f}" for k in CSV_COLUMNS[1:]])


def _f(x) -> float:
    return float(x.detach()) if torch.is_tensor(x) else float(x)


def _check_finite(name, value, dump):
    if not np.isfinite(float(value)):
        path = dump()
        raise TrainingCollapse(
            f"non-finite {name} during attack training; state dumped to {path}",
            dump_path=path,
        )


def train_attacker(gen: AttackerModel, critic: CriticModel, seg: SegModel,
                   data, config: TrainConfig,
                   dump_dir: str | None = None) -> tuple[AttackerModel, CriticModel, TrainLog]:
    """Alternating adversarial updates: `critic_steps_per_gen` clipped critic
    steps per generator step; gradients flow through the frozen segmenter.

    `data` is a sequence of normalized 2D slices (numpy arrays, equal shape).
    """
    if not getattr(seg, "frozen", False):
        raise ValueError("segmenter must be frozen before attack training")
    if len(data) == 0:
        raise ValueError("empty training data")
    w = config.weights
    rng = np.random.default_rng(config.seed)
    torch.manual_seed(config.seed)
    noise_gen = torch.Generator().manual_seed(config.seed)
    stack = np.stack([np.asarray(s, dtype=np.float32) for s in data])
    opt_g = RMSProp([p for p in gen.parameters()],
                    config.learning_rate, config.rmsprop_decay, config.rmsprop_eps)
    opt_c = RMSProp([p for p in critic.parameters()],
                    config.learning_rate, config.rmsprop_decay, config.rmsprop_eps)
    log = TrainLog()

    def dump():
        path = dump_dir or "collapse_dump"
        os.makedirs(path, exist_ok=True)
        tensorio.save_arrays(
            os.path.join(path, "generator"),
            {k: v.detach().numpy() for k, v in gen.state_dict().items()},
            meta={"kind": "generator-dump"})
        tensorio.save_arrays(
            os.path.join(path, "critic"),
            {k: v.detach().numpy() for k, v in critic.state_dict().items()},
            meta={"kind": "critic-dump"})
        log.to_csv(os.path.join(path, "trainlog.csv"))
        return path

    def batch():
        idx = rng.integers(0, stack.shape[0], size=config.batch_size)
        return torch.as_tensor(stack[idx])

    gen.train()
    critic.train()
    for step in range(config.total_steps):
        # critic updates on detached attacks
        disc_loss_val = 0.0
        for _ in range(config.critic_steps_per_gen):
            x = batch()
            with torch.no_grad():
                _, _, i_dv = generate(gen, x, rng=noise_gen)
            s_real = critic_score(critic, x).mean()
            s_fake = critic_score(critic, i_dv).mean()
            _, disc_loss = losses.wgan_pair(s_real, s_fake)
            opt_c.zero_grad()
            disc_loss.backward()
            opt_c.step()
            clip_critic(critic, config.clip_value)
            disc_loss_val = _f(disc_loss)
            _check_finite("critic loss", disc_loss_val, dump)

        # generator update through the frozen segmenter
        x = batch()
        d, v, i_dv = generate(gen, x, rng=noise_gen)
        s_0 = seg(x).permute(0, 2, 3, 1).detach()
        s_dv = seg(i_dv).permute(0, 2, 3, 1)
        m_xent = losses.masked_xent(s_dv, s_0)
        target = (w.xi - m_xent) ** 2
        reg_d = losses.reg_deformation(d, w.lambda_d, w.norm_mode)
        reg_v = losses.reg_intensity(v, w.lambda_v, w.norm_mode)
        gen_adv, _ = losses.wgan_pair(critic_score(critic, x).mean(),
                                      critic_score(critic, i_dv).mean())
        l_gen, _ = losses.total_losses(gen_adv, target, reg_d, reg_v, disc_loss_val)
        _check_finite("generator loss", _f(l_gen), dump)
        opt_g.zero_grad()
        for p in critic.parameters():
            p.grad = None  # critic is fixed during the generator step
        l_gen.backward()
        opt_g.step()

        log.rows.append({
            "step": step,
            "L_gen": _f(l_gen),
            "L_disc": disc_loss_val,
            "gen_adv": _f(gen_adv),
            "target": _f(target),
            "reg_D": _f(reg_d),
            "reg_V": _f(reg_v),
            "masked_xent": _f(m_xent),
            # diagnostics kept out of the CSV schema
            "mean_abs_D": _f(d.abs().mean()),
            "mean_abs_V": _f(v.abs().mean()),
            "percept": _f((i_dv - x).abs().mean()),
        })
    return gen, critic, log
