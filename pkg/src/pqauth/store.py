"""Enrollment, verification and identification over persisted templates.

A template is the enrolled subject's binary (p,q) pattern together with the
featurization parameters that produced it and the hash of the scoring
model.  Embeddings are recomputed at verification time, so templates
survive model upgrades as long as the hash check is satisfied.
"""

from __future__ import annotations

import os
import struct
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union
from urllib.parse import quote, unquote

import numpy as np

from . import chaos01, net, signal
from .errors import (
    ConflictError,
    FormatError,
    InsufficientDataError,
    ModelVersionError,
    NotEnrolledError,
    ParameterError,
)

TEMPLATE_MAGIC = b"PQT1"
TEMPLATE_FORMAT_VERSION = 1
TEMPLATE_SUFFIX = ".pqt"
ENROLL_SAMPLES = 3 * signal.SEGMENT_LEN  # 12 s at 250 Hz


@dataclass(frozen=True)
class BiometricTemplate:
    """Persisted enrollment record for one subject."""

    subject_id: str
    created_at: int  # UTC seconds
    preprocess_mode: signal.PreprocessMode
    c: tuple[float, float, float]
    feature_image: chaos01.FeatureImage
    model_version_hash: bytes

    def __post_init__(self):
        if len(self.model_version_hash) != 32:
            raise ParameterError("model_version_hash must be 32 bytes")


@dataclass(frozen=True)
class VerifyResult:
    score: float
    threshold: float
    decision: str  # "accept" | "reject"

    @property
    def accepted(self) -> bool:
        return self.decision == "accept"


def save_template(template: BiometricTemplate, path: Union[str, Path]) -> None:
    """Atomic write of the template file (temp file + rename)."""
    sid = template.subject_id.encode("utf-8")
    mode_index = list(signal.PreprocessMode).index(template.preprocess_mode)
    payload = bytearray()
    payload += TEMPLATE_MAGIC
    payload += struct.pack("<H", TEMPLATE_FORMAT_VERSION)
    payload += struct.pack("<H", len(sid)) + sid
    payload += struct.pack("<Q", template.created_at)
    payload += struct.pack("<B", mode_index)
    payload += struct.pack("<B", len(template.c))
    for value in template.c:
        payload += struct.pack("<d", value)
    h, w, ch = template.feature_image.pixels.shape
    payload += chaos01.PQI_MAGIC + struct.pack("<HHH", w, h, ch)
    payload += template.feature_image.pixels.tobytes()
    payload += template.model_version_hash

    path = Path(path)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def load_template(path: Union[str, Path]) -> BiometricTemplate:
    """Read a template file; corrupt files raise FormatError with the offset."""
    raw = Path(path).read_bytes()
    if len(raw) < 6:
        raise FormatError("file too short for template header", offset=len(raw))
    if raw[:4] != TEMPLATE_MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {TEMPLATE_MAGIC!r}", offset=0)
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != TEMPLATE_FORMAT_VERSION:
        raise FormatError(f"unsupported template version {version}", offset=4)
    at = 6
    if at + 2 > len(raw):
        raise FormatError("truncated subject id length", offset=at)
    (sid_len,) = struct.unpack_from("<H", raw, at)
    at += 2
    if at + sid_len > len(raw):
        raise FormatError("truncated subject id", offset=at)
    subject_id = raw[at : at + sid_len].decode("utf-8")
    at += sid_len
    if at + 8 + 1 + 1 > len(raw):
        raise FormatError("truncated timestamp/mode block", offset=at)
    (created_at,) = struct.unpack_from("<Q", raw, at)
    at += 8
    mode_index = raw[at]
    at += 1
    modes = list(signal.PreprocessMode)
    if mode_index >= len(modes):
        raise FormatError(f"unknown preprocess mode index {mode_index}", offset=at - 1)
    channel_count = raw[at]
    at += 1
    if at + 8 * channel_count > len(raw):
        raise FormatError("truncated per-channel c block", offset=at)
    c = struct.unpack_from(f"<{channel_count}d", raw, at)
    at += 8 * channel_count
    if channel_count != 3:
        raise FormatError(f"expected 3 channels, got {channel_count}", offset=at)
    block_len = chaos01.pqi_block_size(raw[at:], base_offset=at)
    pixels = chaos01.parse_pqi(raw[at : at + block_len], base_offset=at)
    at += block_len
    if at + 32 > len(raw):
        raise FormatError("truncated model hash", offset=at)
    model_hash = raw[at : at + 32]
    image = chaos01.FeatureImage(
        pixels=pixels, subject_id=subject_id, segment_starts=(0, 1000, 2000), c=tuple(c)
    )
    return BiometricTemplate(
        subject_id=subject_id,
        created_at=created_at,
        preprocess_mode=modes[mode_index],
        c=tuple(c),
        feature_image=image,
        model_version_hash=model_hash,
    )


def _enroll_image(
    record: signal.PpgRecord,
    mode: signal.PreprocessMode,
    params: Sequence[chaos01.PqParams],
    image_size: int,
) -> chaos01.FeatureImage:
    """Featurize the first three consecutive segments of a 12 s record."""
    if record.samples.size < ENROLL_SAMPLES:
        raise InsufficientDataError(
            f"record has {record.samples.size} samples; enrollment needs >= {ENROLL_SAMPLES} (12 s)"
        )
    conditioned = signal.preprocess(record, mode)
    segments = signal.segment(conditioned, signal.Consecutive())[:3]
    return chaos01.featurize(segments, list(params), size=image_size)


class TemplateStore:
    """One template file per subject under a directory; atomic per-file writes."""

    def __init__(self, directory: Union[str, Path]):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def path_for(self, subject_id: str) -> Path:
        return self.directory / (quote(subject_id, safe="") + TEMPLATE_SUFFIX)

    def subject_ids(self) -> list[str]:
        return sorted(
            unquote(p.name[: -len(TEMPLATE_SUFFIX)])
            for p in self.directory.glob(f"*{TEMPLATE_SUFFIX}")
        )

    def has(self, subject_id: str) -> bool:
        return self.path_for(subject_id).exists()

    def load(self, subject_id: str) -> BiometricTemplate:
        path = self.path_for(subject_id)
        if not path.exists():
            raise NotEnrolledError(f"subject {subject_id!r} is not enrolled")
        template = load_template(path)
        if template.subject_id != subject_id:
            raise FormatError(
                f"template file {path.name} holds subject {template.subject_id!r}"
            )
        return template

    def enroll(
        self,
        subject_id: str,
        record: signal.PpgRecord,
        model: net.SiameseModel,
        mode: signal.PreprocessMode,
        params: Sequence[chaos01.PqParams] | chaos01.PqParams | None = None,
        overwrite: bool = False,
        created_at: int | None = None,
    ) -> BiometricTemplate:
        """Featurize a 12 s record consistently with the model and persist it."""
        if not subject_id:
            raise ParameterError("subject_id must be non-empty")
        if self.has(subject_id) and not overwrite:
            raise ConflictError(f"subject {subject_id!r} is already enrolled")
        if params is None:
            params = chaos01.PqParams()
        if isinstance(params, chaos01.PqParams):
            params = [params] * 3
        image = _enroll_image(record, mode, params, model.config.input_hw)
        image = chaos01.FeatureImage(
            pixels=image.pixels,
            subject_id=subject_id,
            segment_starts=image.segment_starts,
            c=image.c,
        )
        template = BiometricTemplate(
            subject_id=subject_id,
            created_at=int(time.time()) if created_at is None else int(created_at),
            preprocess_mode=mode,
            c=image.c,
            feature_image=image,
            model_version_hash=net.model_version_hash(model),
        )
        save_template(template, self.path_for(subject_id))
        return template

    def _probe_image(
        self, template: BiometricTemplate, record: signal.PpgRecord, model: net.SiameseModel
    ) -> chaos01.FeatureImage:
        params = [chaos01.PqParams(c=v) for v in template.c]
        return _enroll_image(record, template.preprocess_mode, params, model.config.input_hw)

    def verify(
        self,
        claimed_id: str,
        record: signal.PpgRecord,
        model: net.SiameseModel,
        threshold: float | None = None,
    ) -> VerifyResult:
        """Score a probe record against the claimed subject's template.

        The probe is featurized with exactly the template's stored
        parameters; the default threshold is the EER working point stored
        with the model.
        """
        template = self.load(claimed_id)
        if template.model_version_hash != net.model_version_hash(model):
            raise ModelVersionError(
                f"template for {claimed_id!r} was enrolled under a different model version"
            )
        if threshold is None:
            threshold = getattr(model, "eer_threshold", None)
        if threshold is None:
            raise ParameterError(
                "no threshold given and the model carries no stored EER threshold"
            )
        probe = self._probe_image(template, record, model)
        value = net.score(model, template.feature_image, probe)
        decision = "accept" if value >= threshold else "reject"
        return VerifyResult(score=value, threshold=float(threshold), decision=decision)

    def identify(
        self, record: signal.PpgRecord, model: net.SiameseModel
    ) -> list[tuple[str, float]]:
        """Rank all enrolled subjects against a probe record, best first.

        Ties break deterministically by subject id.
        """
        ids = self.subject_ids()
        if not ids:
            raise ParameterError("no templates enrolled")
        probes: dict[tuple, chaos01.FeatureImage] = {}
        results = []
        for sid in ids:
            template = self.load(sid)
            if template.model_version_hash != net.model_version_hash(model):
                raise ModelVersionError(
                    f"template for {sid!r} was enrolled under a different model version"
                )
            key = (template.preprocess_mode, template.c)
            if key not in probes:
                probes[key] = self._probe_image(template, record, model)
            value = net.score(model, template.feature_image, probes[key])
            results.append((sid, value))
        results.sort(key=lambda item: (-item[1], item[0]))
        return results
