"""Checkpoint archive: plain-text manifest + little-endian float64 payload.

Layout (all manifest lines are UTF-8, payload is raw bytes after the
sentinel line)::

    peftlab-checkpoint 1
    step <int>
    backbone.hash <hex sha256>
    config <key> <value>                  # sorted by key
    site <idx> <layer> <point> <variant> <M> <sharing> <r> <alpha>
    tensor <name> <shape a,b,..> <offset> <nbytes> <sha256>
    payload.sha256 <hex>
    payload.bytes <int>
    ==payload==
    <raw '<f8' bytes>

The writer is canonical (fixed ordering, repr floats), so save -> load ->
save reproduces the file byte for byte. Checksums cover each tensor and the
whole payload; any mismatch raises a checkpoint error. The backbone itself
is not stored — it is rebuilt from the config echo and verified against
``backbone.hash``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .adapters import AdapterModule, LoraModule
from .backbone import BackboneModel, backbone_checksum, build_backbone, freeze_backbone
from .errors import CheckpointError
from .mixture import MixtureSite, site_parameters
from .tensor import Tensor

MAGIC = "peftlab-checkpoint 1"
SENTINEL = "==payload=="


@dataclass(frozen=True)
class SiteMeta:
    index: int
    layer: int
    point: str
    variant: str
    M: int
    sharing: str
    r: int
    alpha: float


@dataclass
class Checkpoint:
    config: Dict[str, str]
    step: int
    backbone_hash: str
    sites: List[SiteMeta]
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)

    def tensor_bytes(self) -> int:
        return sum(a.nbytes for a in self.tensors.values())


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _tensor_payload(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def checkpoint_from_run(model: BackboneModel, sites, config_entries: Dict[str, str],
                        step: int = 0) -> Checkpoint:
    """Snapshot head + site tensors with the frozen backbone's fingerprint."""
    metas = []
    for site in sites:
        alpha = site.modules[0].alpha if site.variant == "lora" else 0.0
        r = site.modules[0].rank if site.variant == "lora" else site.modules[0].r
        metas.append(SiteMeta(index=site.index, layer=site.layer_index,
                              point=site.point, variant=site.variant, M=site.M,
                              sharing=site.sharing, r=r, alpha=alpha))
    tensors: Dict[str, np.ndarray] = {}
    for name, p in model.head_parameters():
        tensors[name] = p.data.copy()
    for name, p in site_parameters(sites):
        tensors[name] = p.data.copy()
    return Checkpoint(config=dict(config_entries), step=step,
                      backbone_hash=backbone_checksum(model),
                      sites=metas, tensors=tensors)


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    chunks: List[bytes] = []
    records = []
    offset = 0
    for name, arr in ckpt.tensors.items():
        raw = _tensor_payload(arr)
        shape = ",".join(str(s) for s in arr.shape) if arr.ndim else "scalar"
        records.append((name, shape, offset, len(raw), _sha(raw)))
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)

    lines = [MAGIC, f"step {ckpt.step}", f"backbone.hash {ckpt.backbone_hash}"]
    for key in sorted(ckpt.config):
        lines.append(f"config {key} {ckpt.config[key]}")
    for m in sorted(ckpt.sites, key=lambda s: s.index):
        lines.append(f"site {m.index} {m.layer} {m.point} {m.variant} "
                     f"{m.M} {m.sharing} {m.r} {repr(m.alpha)}")
    for name, shape, off, nbytes, digest in records:
        lines.append(f"tensor {name} {shape} {off} {nbytes} {digest}")
    lines.append(f"payload.sha256 {_sha(payload)}")
    lines.append(f"payload.bytes {len(payload)}")
    lines.append(SENTINEL)

    with open(path, "wb") as fh:
        fh.write("\n".join(lines).encode("utf-8"))
        fh.write(b"\n")
        fh.write(payload)


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e

    marker = (SENTINEL + "\n").encode("utf-8")
    cut = blob.find(b"\n" + marker)
    if cut < 0:
        raise CheckpointError(f"{path}: missing payload sentinel")
    manifest = blob[:cut].decode("utf-8").splitlines()
    payload = blob[cut + 1 + len(marker):]

    if not manifest or manifest[0] != MAGIC:
        raise CheckpointError(f"{path}: bad magic line (not a checkpoint?)")

    step = 0
    backbone_hash = ""
    config: Dict[str, str] = {}
    sites: List[SiteMeta] = []
    records: List[Tuple[str, tuple, int, int, str]] = []
    payload_sha: Optional[str] = None
    payload_bytes: Optional[int] = None

    for line in manifest[1:]:
        kind, _, rest = line.partition(" ")
        if kind == "step":
            step = int(rest)
        elif kind == "backbone.hash":
            backbone_hash = rest
        elif kind == "config":
            key, _, value = rest.partition(" ")
            config[key] = value
        elif kind == "site":
            parts = rest.split()
            if len(parts) != 8:
                raise CheckpointError(f"{path}: malformed site line {line!r}")
            sites.append(SiteMeta(index=int(parts[0]), layer=int(parts[1]),
                                  point=parts[2], variant=parts[3], M=int(parts[4]),
                                  sharing=parts[5], r=int(parts[6]),
                                  alpha=float(parts[7])))
        elif kind == "tensor":
            parts = rest.split()
            if len(parts) != 5:
                raise CheckpointError(f"{path}: malformed tensor line {line!r}")
            name, shape_s, off_s, nbytes_s, digest = parts
            shape = () if shape_s == "scalar" else tuple(int(x) for x in shape_s.split(","))
            records.append((name, shape, int(off_s), int(nbytes_s), digest))
        elif kind == "payload.sha256":
            payload_sha = rest
        elif kind == "payload.bytes":
            payload_bytes = int(rest)
        else:
            raise CheckpointError(f"{path}: unknown manifest line {line!r}")

    if payload_bytes is None or payload_sha is None:
        raise CheckpointError(f"{path}: manifest missing payload checksum")
    if len(payload) != payload_bytes:
        raise CheckpointError(
            f"{path}: payload is {len(payload)} bytes, manifest says {payload_bytes}"
        )
    if _sha(payload) != payload_sha:
        raise CheckpointError(f"{path}: payload checksum mismatch")

    tensors: Dict[str, np.ndarray] = {}
    for name, shape, off, nbytes, digest in records:
        raw = payload[off:off + nbytes]
        if len(raw) != nbytes:
            raise CheckpointError(f"{path}: tensor {name} extends past payload end")
        if _sha(raw) != digest:
            raise CheckpointError(f"{path}: tensor {name} checksum mismatch")
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
        tensors[name] = arr
    return Checkpoint(config=config, step=step, backbone_hash=backbone_hash,
                      sites=sites, tensors=tensors)


def _module_from_tensors(meta: SiteMeta, j: int, tensors: Dict[str, np.ndarray],
                         shared: Optional[object]):
    """Rebuild module j of a site; ``shared`` carries the common up side."""
    prefix = f"site{meta.index}.mod{j}"
    shared_prefix = f"site{meta.index}.shared"

    def grab(owner_prefix, field):
        key = f"{owner_prefix}.{field}"
        if key not in tensors:
            raise CheckpointError(f"checkpoint lacks tensor {key}")
        return Tensor(tensors[key].copy(), requires_grad=True)

    if meta.variant == "adapter":
        if meta.sharing == "project_up":
            if shared is None:
                shared = (grab(shared_prefix, "w_up"), grab(shared_prefix, "b_up"))
            w_up, b_up = shared
        else:
            w_up, b_up = grab(prefix, "w_up"), grab(prefix, "b_up")
        mod = AdapterModule(w_down=grab(prefix, "w_down"), b_down=grab(prefix, "b_down"),
                            w_up=w_up, b_up=b_up, r=meta.r)
        return mod, shared
    if meta.sharing == "project_up":
        if shared is None:
            shared = grab(shared_prefix, "B")
        B = shared
    else:
        B = grab(prefix, "B")
    mod = LoraModule(A=grab(prefix, "A"), B=B, rank=meta.r, alpha=meta.alpha)
    return mod, shared


def sites_from_checkpoint(ckpt: Checkpoint) -> List[MixtureSite]:
    sites = []
    for meta in sorted(ckpt.sites, key=lambda s: s.index):
        shared = None
        modules = []
        for j in range(meta.M):
            mod, shared = _module_from_tensors(meta, j, ckpt.tensors, shared)
            modules.append(mod)
        sites.append(MixtureSite(layer_index=meta.layer, point=meta.point,
                                 modules=modules, sharing=meta.sharing,
                                 variant=meta.variant, index=meta.index).validate())
    return sites


def instantiate(ckpt: Checkpoint) -> Tuple[BackboneModel, List[MixtureSite]]:
    """Rebuild the frozen model and sites; verify the backbone fingerprint."""
    from .config import run_config_from_entries

    run = run_config_from_entries(ckpt.config)
    model = build_backbone(run.backbone, seed=run.backbone_seed)
    if backbone_checksum(model) != ckpt.backbone_hash:
        raise CheckpointError(
            "backbone rebuilt from the config echo does not match the stored "
            "fingerprint; config and weights disagree"
        )
    freeze_backbone(model, head_trainable=run.head_trainable)
    for name, p in model.head_parameters():
        if name not in ckpt.tensors:
            raise CheckpointError(f"checkpoint lacks tensor {name}")
        if ckpt.tensors[name].shape != p.shape:
            raise CheckpointError(
                f"tensor {name} has shape {ckpt.tensors[name].shape}, "
                f"model expects {p.shape}"
            )
        p.data[:] = ckpt.tensors[name]
    return model, sites_from_checkpoint(ckpt)


def merge_checkpoint(ckpt: Checkpoint) -> Checkpoint:
    """Collapse every site to its single merged module (same schema, M=1)."""
    from .mixture import merge_sites

    sites = merge_sites(sites_from_checkpoint(ckpt))
    metas = []
    tensors: Dict[str, np.ndarray] = {}
    for name in ("head.w", "head.b"):
        tensors[name] = ckpt.tensors[name].copy()
    for site in sites:
        old = next(m for m in ckpt.sites if m.index == site.index)
        metas.append(SiteMeta(index=site.index, layer=site.layer_index,
                              point=site.point, variant=site.variant, M=1,
                              sharing="none", r=old.r, alpha=old.alpha))
    for name, p in site_parameters(sites):
        tensors[name] = p.data.copy()
    config = dict(ckpt.config)
    config["adapt.M"] = "1"
    config["adapt.sharing"] = "none"
    return Checkpoint(config=config, step=ckpt.step,
                      backbone_hash=ckpt.backbone_hash, sites=metas,
                      tensors=tensors)
