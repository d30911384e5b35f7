"""Versioned checkpoint container.

A checkpoint carries the resolved config, an architecture hash, the shape of
every parameter, the state dicts and the BPE vocabulary; loading refuses
mismatching versions, architectures and shapes.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import torch

from bpe import BpeVocab
from configfile import RunConfig, architecture_hash, config_from_dict
from util import traced

FORMAT_VERSION = 1


class WrongCheckpointVersionError(Exception):
    def __init__(self, program_version: int, checkpoint_version):
        self.program_version = program_version
        self.checkpoint_version = checkpoint_version
        super().__init__(
            f"Program ({program_version}) and checkpoint format ({checkpoint_version}) don't match!",
        )


class IncompatibleCheckpoint(Exception):
    def __init__(self, path, problems: List[str]):
        self.path = path
        self.problems = problems
        super().__init__(f"{path} is incompatible with this run: " + "; ".join(problems))


@dataclass
class Checkpoint:
    config: RunConfig
    state: Dict[str, torch.Tensor]
    vocab: BpeVocab
    loss_trace: List[float] = field(default_factory=list)
    mlm_loss_trace: List[float] = field(default_factory=list)
    head_state: Optional[Dict[str, torch.Tensor]] = None
    alpha: Optional[List[float]] = None

    def fusion_state(self) -> Optional[Dict[str, torch.Tensor]]:
        fusion = {name[len("fusion."):]: value for name, value in self.state.items() if name.startswith("fusion.")}
        return fusion or None


def shape_manifest(state: Dict[str, torch.Tensor]) -> Dict[str, List[int]]:
    return {name: list(value.shape) for name, value in state.items()}


@traced
def save_checkpoint(path: Path, checkpoint: Checkpoint):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format_version": FORMAT_VERSION,
        "architecture_hash": architecture_hash(checkpoint.config),
        "config": checkpoint.config.to_dict(),
        "shapes": shape_manifest(checkpoint.state),
        "state": checkpoint.state,
        "head_state": checkpoint.head_state,
        "vocab": checkpoint.vocab.to_dict(),
        "loss_trace": list(checkpoint.loss_trace),
        "mlm_loss_trace": list(checkpoint.mlm_loss_trace),
        "alpha": checkpoint.alpha,
    }, path)
    logging.info("Saved checkpoint %s", path)


@traced
def load_checkpoint(path: Path, expected: Optional[RunConfig] = None) -> Checkpoint:
    """Load and check a checkpoint; with ``expected`` the architectures must agree."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    content = torch.load(path, map_location="cpu", weights_only=False)
    version = content.get("format_version")
    if version != FORMAT_VERSION:
        raise WrongCheckpointVersionError(FORMAT_VERSION, version)
    config = config_from_dict(content["config"])
    problems = []
    if content["architecture_hash"] != architecture_hash(config):
        problems.append("stored architecture hash does not match the stored config")
    if expected is not None and architecture_hash(expected) != content["architecture_hash"]:
        problems.append("architecture settings differ from the current config")
    manifest = content["shapes"]
    for name, value in content["state"].items():
        if manifest.get(name) != list(value.shape):
            problems.append(f"{name}: stored shape {list(value.shape)}, manifest {manifest.get(name)}")
    if problems:
        raise IncompatibleCheckpoint(path, problems)
    return Checkpoint(
        config=config,
        state=content["state"],
        vocab=BpeVocab.from_dict(content["vocab"]),
        loss_trace=content.get("loss_trace", []),
        mlm_loss_trace=content.get("mlm_loss_trace", []),
        head_state=content.get("head_state"),
        alpha=content.get("alpha"),
    )


def restore_state(module: torch.nn.Module, state: Dict[str, torch.Tensor], path="checkpoint"):
    own = module.state_dict()
    problems = [
        f"{name}: checkpoint {list(value.shape)}, model {list(own[name].shape)}"
        for name, value in state.items()
        if name in own and own[name].shape != value.shape
    ]
    missing = sorted(set(own) - set(state))
    unexpected = sorted(set(state) - set(own))
    if missing:
        problems.append(f"missing parameters {missing[:5]}")
    if unexpected:
        problems.append(f"unexpected parameters {unexpected[:5]}")
    if problems:
        raise IncompatibleCheckpoint(path, problems)
    module.load_state_dict(state)
