"""Clients for external scoring and transcript sources.

The scoring service is an HTTP endpoint that accepts a multipart POST with
``far``, ``mic`` and ``processed`` WAV parts plus a ``scenario`` form field
(``fest``, ``dt`` or ``nest``) and answers with JSON::

    {"echo_dmos": 4.1, "other_dmos": 3.9}     # fest, dt
    {"mos": 3.7}                              # nest

Network failures never abort a batch: after the retry budget is spent the
client returns :data:`UNAVAILABLE`.
"""

from __future__ import annotations

import logging
import math
import os
import time
from pathlib import Path

import requests

from .metrics import Transcript

log = logging.getLogger(__name__)

ENDPOINT_ENV = "AECKIT_SCORE_ENDPOINT"
KEY_ENV = "AECKIT_SCORE_KEY"
UNAVAILABLE = "unavailable"
RESPONSE_FIELDS = {"fest": ("echo_dmos", "other_dmos"), "dt": ("echo_dmos", "other_dmos"), "nest": ("mos",)}


class ScoreParseError(ValueError):
    """The service answered, but the body is not a valid score document."""


def parse_scores(body, scenario_kind: str) -> dict[str, float]:
    if scenario_kind not in RESPONSE_FIELDS:
        raise ValueError(f"unknown scenario kind {scenario_kind!r}")
    if not isinstance(body, dict):
        raise ScoreParseError("response body is not a JSON object")
    out = {}
    for name in RESPONSE_FIELDS[scenario_kind]:
        if name not in body:
            raise ScoreParseError(f"response is missing field {name!r}")
        v = body[name]
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v) or not 1 <= v <= 5:
            raise ScoreParseError(f"field {name!r} has invalid value {v!r}")
        out[name] = float(v)
    return out


def score_client_submit(endpoint: str | None, far, mic, processed, scenario_kind: str, *,
                        api_key: str | None = None, attempts: int = 3, backoff_s: float = 0.5,
                        timeout_s: float = 30.0, session=None):
    """Submit one clip triple; returns a score dict or :data:`UNAVAILABLE`.

    ``endpoint=None`` (offline mode) returns :data:`UNAVAILABLE` immediately.
    Connection errors and 5xx responses are retried with exponential
    backoff.  A malformed success body raises :class:`ScoreParseError`.
    """
    endpoint = endpoint or os.environ.get(ENDPOINT_ENV)
    if not endpoint:
        return UNAVAILABLE
    api_key = api_key or os.environ.get(KEY_ENV)
    headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
    http = session or requests
    for attempt in range(attempts):
        if attempt:
            time.sleep(backoff_s * 2 ** (attempt - 1))
        try:
            with open(far, "rb") as f1, open(mic, "rb") as f2, open(processed, "rb") as f3:
                resp = http.post(endpoint, files={"far": f1, "mic": f2, "processed": f3},
                                 data={"scenario": scenario_kind}, headers=headers, timeout=timeout_s)
        except requests.RequestException as exc:
            log.warning("score request failed (attempt %d/%d): %s", attempt + 1, attempts, exc)
            continue
        if resp.status_code >= 500:
            log.warning("score service returned %d (attempt %d/%d)", resp.status_code, attempt + 1, attempts)
            continue
        if resp.status_code != 200:
            log.warning("score service rejected request with %d", resp.status_code)
            return UNAVAILABLE
        try:
            body = resp.json()
        except ValueError as exc:
            raise ScoreParseError(f"response is not JSON: {exc}") from exc
        return parse_scores(body, scenario_kind)
    return UNAVAILABLE


def read_transcript(path) -> Transcript:
    text = Path(path).read_text(encoding="utf-8")
    return Transcript.from_text(text.replace("\r\n", "\n"))


def transcript_client(directory, ids=None) -> tuple[dict[str, Transcript], list[str]]:
    """Read ``{id}.txt`` transcripts.

    Returns the transcripts found and, when ``ids`` is given, the ids whose
    file is missing.
    """
    directory = Path(directory)
    if ids is None:
        ids = sorted(p.stem for p in directory.glob("*.txt"))
    found, missing = {}, []
    for i in ids:
        p = directory / f"{i}.txt"
        if p.exists():
            found[i] = read_transcript(p)
        else:
            missing.append(i)
    return found, missing
