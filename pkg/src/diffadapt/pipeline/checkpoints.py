"""Checkpoint containers: one archive with named parameter arrays, the noise
schedule, and a metadata record (step count, config hash, checkpoint id)."""

from __future__ import annotations

from pathlib import Path

import torch
import torch.nn as nn

from ..diffusion import NoiseSchedule


def save_checkpoint(
    path: str | Path,
    modules: dict[str, nn.Module],
    meta: dict,
    schedule: NoiseSchedule | None = None,
) -> Path:
    params = {}
    for prefix, module in modules.items():
        for name, tensor in module.state_dict().items():
            params[f"{prefix}.{name}"] = tensor.detach().cpu().clone()
    payload = {"params": params, "meta": dict(meta)}
    if schedule is not None:
        payload["schedule"] = {"betas": schedule.betas, "alpha_bars": schedule.alpha_bars}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if "schedule" in payload:
        payload["schedule"] = NoiseSchedule(**payload["schedule"])
    return payload


def load_module(module: nn.Module, params: dict, prefix: str) -> None:
    state = {}
    lead = prefix + "."
    for key, tensor in params.items():
        if key.startswith(lead):
            state[key[len(lead):]] = tensor
    if not state:
        raise KeyError(f"checkpoint holds no parameters under prefix {prefix!r}")
    module.load_state_dict(state)


def require_hash(meta: dict, expected: str, artifact: str) -> None:
    found = meta.get("config_hash")
    if found != expected:
        raise ValueError(
            f"{artifact} was produced under config hash {found!r}, current config hashes to "
            f"{expected!r}; refusing mismatched artifacts"
        )
