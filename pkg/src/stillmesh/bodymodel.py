"""Articulated body model and linear blend skinning."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import aa_to_matrix, batch_aa_to_matrix


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ShapeParams:
    beta: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float).reshape(-1))
        if not np.all(np.isfinite(self.beta)):
            raise ModelError("non-finite shape coefficients")
        if not self.scale > 0:
            raise ModelError("body scale must be positive")


@dataclass(frozen=True)
class GlobalPlacement:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "GlobalPlacement":
        return cls(np.zeros(3), np.zeros(3))


@dataclass(frozen=True)
class BodyModel:
    template_vertices: np.ndarray   # (V, 3)
    faces: np.ndarray               # (F, 3) int
    rest_joints: np.ndarray         # (J, 3)
    parent: np.ndarray              # (J,), parent[0] == -1
    skin_weights: np.ndarray        # (V, J)
    shape_dirs: np.ndarray          # (V, 3, B)
    joint_regressor: np.ndarray | None = None  # (J, V)

    def __post_init__(self):
        self.validate()
        if self.joint_regressor is None:
            d = ((self.rest_joints[:, None, :] - self.template_vertices[None]) ** 2).sum(-1)
            object.__setattr__(self, "_nearest", d.argmin(axis=1) if d.size else None)

    @property
    def n_vertices(self) -> int:
        return self.template_vertices.shape[0]

    @property
    def n_joints(self) -> int:
        return self.rest_joints.shape[0]

    @property
    def n_betas(self) -> int:
        return self.shape_dirs.shape[2]

    def validate(self) -> None:
        V, F, J = self.template_vertices, self.faces, self.rest_joints
        if V.ndim != 2 or V.shape[1] != 3:
            raise ModelError("dimension mismatch: template_vertices must be (N_v, 3)")
        nv = V.shape[0]
        if F.ndim != 2 or F.shape[1] != 3:
            raise ModelError("dimension mismatch: faces must be (N_f, 3)")
        if F.size and (F.min() < 0 or F.max() >= nv):
            raise ModelError("dimension mismatch: face index out of range")
        if J.ndim != 2 or J.shape[1] != 3 or J.shape[0] < 1:
            raise ModelError("dimension mismatch: rest_joints must be (J, 3)")
        nj = J.shape[0]
        p = self.parent
        if p.shape != (nj,):
            raise ModelError("dimension mismatch: parent must have length J")
        if p[0] != -1:
            raise ModelError("cyclic parent array: joint 0 must be the root")
        for j in range(1, nj):
            if not 0 <= p[j] < j:
                raise ModelError(f"cyclic parent array: parent[{j}]={p[j]} is not an earlier joint")
        W = self.skin_weights
        if W.shape != (nv, nj):
            raise ModelError("dimension mismatch: skin_weights must be (N_v, J)")
        if W.min() < 0 or np.abs(W.sum(axis=1) - 1.0).max() > 1e-6:
            raise ModelError("weights not normalized")
        S = self.shape_dirs
        if S.ndim != 3 or S.shape[:2] != (nv, 3):
            raise ModelError("dimension mismatch: shape_dirs must be (N_v, 3, N_beta)")
        if self.joint_regressor is not None and self.joint_regressor.shape != (nj, nv):
            raise ModelError("dimension mismatch: joint_regressor must be (J, N_v)")
        for name in ("template_vertices", "rest_joints", "skin_weights", "shape_dirs"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ModelError(f"non-finite values in {name}")

    def shaped(self, beta) -> tuple[np.ndarray, np.ndarray]:
        """Rest-pose vertices and joints after applying shape coefficients."""
        beta = np.asarray(beta, dtype=float).reshape(-1)
        if beta.shape[0] != self.n_betas:
            raise ModelError(f"dimension mismatch: expected {self.n_betas} shape coefficients")
        offsets = self.shape_dirs @ beta
        verts = self.template_vertices + offsets
        if self.joint_regressor is not None:
            joints = self.joint_regressor @ verts
        else:
            joints = self.rest_joints + offsets[self._nearest]
        return verts, joints

    def to_dict(self) -> dict:
        d = {
            "template_vertices": self.template_vertices.tolist(),
            "faces": self.faces.tolist(),
            "rest_joints": self.rest_joints.tolist(),
            "parent": self.parent.tolist(),
            "skin_weights": self.skin_weights.tolist(),
            "shape_dirs": self.shape_dirs.tolist(),
        }
        if self.joint_regressor is not None:
            d["joint_regressor"] = self.joint_regressor.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BodyModel":
        required = ("template_vertices", "faces", "rest_joints", "parent",
                    "skin_weights", "shape_dirs")
        missing = [k for k in required if k not in d]
        if missing:
            raise ModelError(f"parse failure: missing keys {missing}")
        try:
            verts = np.asarray(d["template_vertices"], dtype=float)
            faces = np.asarray(d["faces"], dtype=np.int64)
            joints = np.asarray(d["rest_joints"], dtype=float)
            parent = np.asarray([-1 if p is None else p for p in d["parent"]], dtype=np.int64)
            weights = np.asarray(d["skin_weights"], dtype=float)
            sdirs = np.asarray(d["shape_dirs"], dtype=float)
            reg = d.get("joint_regressor")
            reg = None if reg is None else np.asarray(reg, dtype=float)
        except (TypeError, ValueError) as exc:
            raise ModelError(f"parse failure: {exc}") from None
        if faces.size == 0:
            faces = faces.reshape(0, 3)
        if sdirs.size == 0 and verts.ndim == 2:
            sdirs = np.zeros((verts.shape[0], 3, 0))
        return cls(verts, faces, joints, parent, weights, sdirs, reg)


def load_body_model(path) -> BodyModel:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ModelError(f"parse failure: {exc}") from None
    if not isinstance(data, dict):
        raise ModelError("parse failure: model file must hold a JSON object")
    return BodyModel.from_dict(data)


def save_body_model(model: BodyModel, path) -> None:
    Path(path).write_text(json.dumps(model.to_dict()))


def joint_transforms(model: BodyModel, pose, joints: np.ndarray) -> np.ndarray:
    """World transforms (J, 3, 4) of every joint, relative to the rest pose."""
    pose = np.asarray(pose, dtype=float).reshape(-1)
    nj = model.n_joints
    if pose.shape[0] != 3 * nj:
        raise ModelError(f"dimension mismatch: pose needs {3 * nj} values, got {pose.shape[0]}")
    rots = batch_aa_to_matrix(pose.reshape(nj, 3))
    G_R = np.empty((nj, 3, 3))
    G_t = np.empty((nj, 3))
    G_R[0], G_t[0] = rots[0], joints[0]
    for j in range(1, nj):
        p = model.parent[j]
        G_R[j] = G_R[p] @ rots[j]
        G_t[j] = G_R[p] @ (joints[j] - joints[p]) + G_t[p]
    out = np.empty((nj, 3, 4))
    out[:, :, :3] = G_R
    out[:, :, 3] = G_t - np.einsum("jab,jb->ja", G_R, joints)
    return out


def pose_mesh(model: BodyModel, pose, shape: ShapeParams, placement: GlobalPlacement) -> np.ndarray:
    """Camera-frame vertices ``R (scale * LBS(template + S beta, pose)) + t``."""
    verts, joints = model.shaped(shape.beta)
    A = joint_transforms(model, pose, joints)
    T = np.tensordot(model.skin_weights, A, axes=1)  # (V, 3, 4)
    skinned = np.einsum("vab,vb->va", T[:, :, :3], verts) + T[:, :, 3]
    R = aa_to_matrix(placement.rotation)
    return shape.scale * skinned @ R.T + placement.translation


def posed_joints(model: BodyModel, pose, shape: ShapeParams, placement: GlobalPlacement) -> np.ndarray:
    """Camera-frame joint centres under the same transform as ``pose_mesh``."""
    _, joints = model.shaped(shape.beta)
    A = joint_transforms(model, pose, joints)
    pj = np.einsum("jab,jb->ja", A[:, :, :3], joints) + A[:, :, 3]
    R = aa_to_matrix(placement.rotation)
    return shape.scale * pj @ R.T + placement.translation
