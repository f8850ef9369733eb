"""Small shared helpers: deterministic seed derivation and manifest writing."""

import hashlib
import json
import os


def derive_seed(*parts):
    """Map an arbitrary tuple of labels/ints to a stable 63-bit seed.

    Uses blake2b so the stream layout never depends on Python hash
    randomization. Distinct part tuples give independent streams.
    """
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") & (2**63 - 1)


def stable_json(obj):
    """Canonical JSON encoding (sorted keys, no whitespace drift)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj):
    """sha256 over the canonical JSON of a config-like mapping."""
    return hashlib.sha256(stable_json(obj).encode("utf-8")).hexdigest()


def write_manifest(path, payload):
    """Write a run manifest as deterministic JSON (no timestamps).

    Reruns with identical inputs must produce byte-identical manifests,
    so nothing time- or host-dependent goes in here.
    """
    text = json.dumps(payload, sort_keys=True, indent=2) + "\n"
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)
    return path
