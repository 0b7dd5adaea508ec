"""Synthetic catalog / user / interaction generator.

Latent concepts carry a clean text signature and an image template. Items
reference a concept; a configurable fraction have corrupted text (tokens
swapped in from a different concept) or corrupted images (blended with
uniform noise). Purchase labels are driven by the TRUE concept id even
for corrupted items, so cross-modal alignment has signal to recover.

All generation is fully determined by seeds; serialized files are
byte-identical across regenerations from the same manifest.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError, DataParseError

IMAGE_SIZE = 30
IMAGE_CHANNELS = 1
PATCH_GRID = 3

TEXT_CORRUPTION_TOKEN_FRACTION = 0.6
IMAGE_CORRUPTION_BLEND = 0.6
SIGNATURE_TOKENS = 6
MIN_TEMPLATE_DISTANCE = 1.0

GENERIC_TOKENS = ("fresh", "local", "farm", "pack", "good", "item")


@dataclass
class LatentConcept:
    concept_id: int
    text_signature: list[str]
    image_template: np.ndarray  # (H, W, C) floats in [0, 1]
    # factorized mode only: which shared signature / template this concept
    # uses (-1 when every concept has its own)
    signature_group: int = -1
    template_group: int = -1


@dataclass
class ItemRecord:
    item_id: int
    concept_id: int
    text_tokens: list[str]
    image: np.ndarray  # (H, W, C) float32 in [0, 1]
    text_corrupted: bool
    image_corrupted: bool

    @property
    def text(self) -> str:
        return " ".join(self.text_tokens)


@dataclass
class InteractionRecord:
    user_id: int
    timestamp: int
    item_id: int
    bought: int


@dataclass
class PreferenceModel:
    """Latent purchase model: prob = sigmoid(gain * (pref . concept) + bias)."""

    dim: int = 8
    gain: float = 4.0
    pos_fraction: float = 0.2
    noise_std: float = 0.3
    popularity_spread: float = 0.0  # per-concept logit offset ~ U(-s, s)


@dataclass
class DatasetManifest:
    seed: int = 0
    num_concepts: int = 50
    num_items: int = 1000
    num_users: int = 500
    num_interactions: int = 20000
    signature_groups: int = 0
    template_groups: int = 0
    text_corruption_rate: float = 0.3
    image_corruption_rate: float = 0.3
    split_fraction: float = 0.75
    preference: PreferenceModel = field(default_factory=PreferenceModel)
    checksums: dict = field(default_factory=dict)


def _draw_signature(rng, pool, used: set) -> tuple:
    while True:
        sig = tuple(rng.choice(pool, size=SIGNATURE_TOKENS, replace=False).tolist())
        if sig not in used:
            used.add(sig)
            return sig


def _draw_template(rng, templates: list) -> np.ndarray:
    while True:
        coarse = rng.uniform(0.0, 1.0, (PATCH_GRID, PATCH_GRID))
        tpl = np.kron(coarse, np.ones((IMAGE_SIZE // PATCH_GRID,
                                       IMAGE_SIZE // PATCH_GRID)))
        tpl = tpl[:, :, None].repeat(IMAGE_CHANNELS, axis=2)
        if all(np.linalg.norm(tpl - t) >= MIN_TEMPLATE_DISTANCE for t in templates):
            templates.append(tpl)
            return tpl


def gen_concepts(num_concepts: int, seed: int, signature_groups: int = 0,
                 template_groups: int = 0) -> list[LatentConcept]:
    """Latent concepts with text signatures and image templates.

    By default every concept gets its own distinct signature and template.
    With ``signature_groups``/``template_groups`` > 0 the concepts are a
    random subset of the (signature group x template group) grid: several
    concepts share a signature or a template, and only the *combination*
    identifies the concept. Neither modality alone determines the concept
    then, which makes concept-level quantities cross-modal by construction.
    """
    rng = np.random.default_rng([seed, 11])
    pool = [f"w{i:04d}" for i in range(max(4 * max(num_concepts,
                                                   signature_groups), 40))]
    used: set[tuple] = set()
    templates: list[np.ndarray] = []
    if (signature_groups > 0) != (template_groups > 0):
        raise ContractError("signature_groups and template_groups must be "
                            "both zero or both positive")
    if signature_groups:
        if signature_groups * template_groups < num_concepts:
            raise ContractError(
                f"{signature_groups}x{template_groups} grid cannot host "
                f"{num_concepts} concepts")
        sigs = [_draw_signature(rng, pool, used)
                for _ in range(signature_groups)]
        tpls = [_draw_template(rng, templates)
                for _ in range(template_groups)]
        if num_concepts == 2 * signature_groups == 2 * template_groups:
            # 2-regular layout: an alternating cycle through the grid so
            # every signature and every template is shared by exactly two
            # concepts — neither modality alone pins down the concept.
            g = signature_groups
            ps, pt = rng.permutation(g), rng.permutation(g)
            chosen = []
            for i in range(g):
                chosen.append((int(ps[i]), int(pt[i])))
                chosen.append((int(ps[(i + 1) % g]), int(pt[i])))
        else:
            combos = [(i, j) for i in range(signature_groups)
                      for j in range(template_groups)]
            order = rng.permutation(len(combos))
            chosen = [combos[k] for k in order[:num_concepts]]
        return [LatentConcept(cid, list(sigs[i]), tpls[j],
                              signature_group=i, template_group=j)
                for cid, (i, j) in enumerate(chosen)]
    concepts: list[LatentConcept] = []
    for cid in range(num_concepts):
        sig = _draw_signature(rng, pool, used)
        tpl = _draw_template(rng, templates)
        concepts.append(LatentConcept(cid, list(sig), tpl))
    return concepts


def gen_catalog(num_concepts: int, num_items: int, text_corruption_rate: float,
                image_corruption_rate: float, seed: int,
                concepts: Optional[list[LatentConcept]] = None
                ) -> tuple[list[LatentConcept], list[ItemRecord]]:
    """Items over latent concepts with independent per-item corruption."""
    if not (0.0 <= text_corruption_rate <= 1.0 and 0.0 <= image_corruption_rate <= 1.0):
        raise ContractError("corruption rates must lie in [0, 1]")
    if num_concepts > num_items:
        raise ContractError(f"more concepts ({num_concepts}) than items ({num_items})")
    if concepts is None:
        concepts = gen_concepts(num_concepts, seed)
    rng = np.random.default_rng([seed, 22])
    items: list[ItemRecord] = []
    for item_id in range(num_items):
        concept = concepts[rng.integers(num_concepts)]
        tokens = list(concept.text_signature)
        rng.shuffle(tokens)
        tokens.append(GENERIC_TOKENS[rng.integers(len(GENERIC_TOKENS))])
        text_corrupted = bool(rng.random() < text_corruption_rate)
        if text_corrupted:
            other = concepts[(concept.concept_id + 1 + rng.integers(num_concepts - 1))
                             % num_concepts]
            n_swap = round(TEXT_CORRUPTION_TOKEN_FRACTION * len(tokens))
            for pos in rng.choice(len(tokens), size=n_swap, replace=False):
                tokens[pos] = other.text_signature[rng.integers(SIGNATURE_TOKENS)]
        image = concept.image_template + rng.normal(0.0, 0.03, concept.image_template.shape)
        image_corrupted = bool(rng.random() < image_corruption_rate)
        if image_corrupted:
            noise = rng.uniform(0.0, 1.0, image.shape)
            image = (1.0 - IMAGE_CORRUPTION_BLEND) * image + IMAGE_CORRUPTION_BLEND * noise
        image = np.clip(image, 0.0, 1.0).astype(np.float32)
        items.append(ItemRecord(item_id, concept.concept_id, tokens, image,
                                text_corrupted, image_corrupted))
    return concepts, items


def _balance_popularity(pop: np.ndarray, concepts: Sequence[LatentConcept],
                        spread: float) -> np.ndarray:
    """Remove the single-modality component of per-concept popularity.

    Projects the popularity vector onto the subspace whose mean is zero
    within every signature group and every template group, then rescales
    to RMS ``spread``. After this, knowing only a concept's signature (or
    only its template) predicts zero expected popularity; the signal
    lives entirely in the signature-template combination.
    """
    sig = np.array([c.signature_group for c in concepts])
    tpl = np.array([c.template_group for c in concepts])
    pop = pop.copy()
    for _ in range(200):  # alternating projection onto the two constraints
        for g in np.unique(sig):
            pop[sig == g] -= pop[sig == g].mean()
        for g in np.unique(tpl):
            pop[tpl == g] -= pop[tpl == g].mean()
    rms = float(np.sqrt(np.mean(pop ** 2)))
    if rms < 1e-9:
        return np.zeros_like(pop)
    return pop * (spread / rms)


def gen_interactions(num_users: int, catalog: Sequence[ItemRecord],
                     num_interactions: int, preference: PreferenceModel,
                     seed: int, num_concepts: Optional[int] = None,
                     concepts: Optional[Sequence[LatentConcept]] = None
                     ) -> list[InteractionRecord]:
    """Interaction log with ~preference.pos_fraction positives.

    Purchase probability depends on the item's true concept (not its
    possibly-corrupted text/image); timestamps are strictly increasing
    per user.
    """
    if num_interactions < 1:
        raise ContractError("num_interactions must be >= 1")
    if not catalog:
        raise ContractError("empty catalog")
    if num_concepts is None:
        num_concepts = max(i.concept_id for i in catalog) + 1
    rng = np.random.default_rng([seed, 33])
    c_emb = rng.standard_normal((num_concepts, preference.dim))
    c_emb /= np.linalg.norm(c_emb, axis=1, keepdims=True)
    prefs = rng.standard_normal((num_users, preference.dim))
    prefs /= np.linalg.norm(prefs, axis=1, keepdims=True)

    popularity = rng.uniform(-preference.popularity_spread,
                             preference.popularity_spread, num_concepts)
    if (preference.popularity_spread > 0.0 and concepts is not None
            and all(c.signature_group >= 0 for c in concepts)):
        popularity = _balance_popularity(popularity, concepts,
                                         preference.popularity_spread)

    users = rng.integers(num_users, size=num_interactions)
    item_idx = rng.integers(len(catalog), size=num_interactions)
    concept_ids = np.array([catalog[i].concept_id for i in item_idx])
    raw = np.einsum("ij,ij->i", prefs[users], c_emb[concept_ids])
    raw = raw + rng.normal(0.0, preference.noise_std, num_interactions)
    raw = raw + popularity[concept_ids] / max(preference.gain, 1e-12)

    # center the logits so the mean purchase probability hits pos_fraction
    lo, hi = -20.0, 20.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        mean_p = np.mean(1.0 / (1.0 + np.exp(-(preference.gain * raw + mid))))
        if mean_p > preference.pos_fraction:
            hi = mid
        else:
            lo = mid
    bias = 0.5 * (lo + hi)
    probs = 1.0 / (1.0 + np.exp(-(preference.gain * raw + bias)))
    bought = (rng.random(num_interactions) < probs).astype(int)

    clocks = dict.fromkeys(range(num_users), 0)
    records = []
    for u, i, b in zip(users, item_idx, bought):
        u = int(u)
        clocks[u] += 1
        records.append(InteractionRecord(u, clocks[u], catalog[int(i)].item_id, int(b)))
    return records


def _user_bucket(seed: int, user_id: int) -> float:
    digest = hashlib.sha256(f"{seed}:{user_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little") / 2 ** 64


def split_dataset(records: Sequence[InteractionRecord], fraction: float = 0.75,
                  seed: int = 0) -> tuple[list[InteractionRecord], list[InteractionRecord]]:
    """Split by user-id hash: each user's records land wholly on one side."""
    if not 0.0 < fraction < 1.0:
        raise ContractError(f"split fraction {fraction} outside (0, 1)")
    train, test = [], []
    for r in records:
        (train if _user_bucket(seed, r.user_id) < fraction else test).append(r)
    return train, test


def split_users(user_ids: Sequence[int], fraction: float, seed: int) -> set[int]:
    """The subset of user ids landing on the train side of the hash split."""
    return {u for u in user_ids if _user_bucket(seed, u) < fraction}


# ----------------------------------------------------------------------
# serialization


def _image_to_b64(image: np.ndarray) -> str:
    return base64.b64encode(image.astype("<f4").tobytes(order="C")).decode("ascii")


def _image_from_b64(text: str, shape) -> np.ndarray:
    raw = base64.b64decode(text.encode("ascii"))
    expected = int(np.prod(shape)) * 4
    if len(raw) != expected:
        raise ValueError(f"image payload has {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()


def _dump_line(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_catalog(path, items: Sequence[ItemRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for item in items:
            fh.write(_dump_line({
                "item_id": item.item_id,
                "concept_id": item.concept_id,
                "text_tokens": item.text_tokens,
                "image_b64": _image_to_b64(item.image),
                "image_shape": list(item.image.shape),
                "text_corrupted": item.text_corrupted,
                "image_corrupted": item.image_corrupted,
            }) + "\n")


def read_catalog(path) -> list[ItemRecord]:
    items = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                items.append(ItemRecord(
                    item_id=int(obj["item_id"]),
                    concept_id=int(obj["concept_id"]),
                    text_tokens=[str(t) for t in obj["text_tokens"]],
                    image=_image_from_b64(obj["image_b64"], obj["image_shape"]),
                    text_corrupted=bool(obj["text_corrupted"]),
                    image_corrupted=bool(obj["image_corrupted"]),
                ))
            except (KeyError, ValueError, TypeError) as exc:
                raise DataParseError(f"bad catalog record: {exc}", line_number=lineno)
    return items


def write_interactions(path, records: Sequence[InteractionRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(_dump_line({
                "user_id": r.user_id, "timestamp": r.timestamp,
                "item_id": r.item_id, "bought": r.bought,
            }) + "\n")


def read_interactions(path) -> list[InteractionRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                records.append(InteractionRecord(
                    user_id=int(obj["user_id"]), timestamp=int(obj["timestamp"]),
                    item_id=int(obj["item_id"]), bought=int(obj["bought"])))
            except (KeyError, ValueError, TypeError) as exc:
                raise DataParseError(f"bad interaction record: {exc}", line_number=lineno)
    return records


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def generate_dataset(manifest: DatasetManifest, out_dir) -> DatasetManifest:
    """Generate and serialize catalog + interactions + manifest under out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    concepts = gen_concepts(manifest.num_concepts, manifest.seed,
                            manifest.signature_groups, manifest.template_groups)
    _, items = gen_catalog(manifest.num_concepts, manifest.num_items,
                           manifest.text_corruption_rate,
                           manifest.image_corruption_rate, manifest.seed,
                           concepts=concepts)
    records = gen_interactions(manifest.num_users, items, manifest.num_interactions,
                               manifest.preference, manifest.seed,
                               num_concepts=manifest.num_concepts,
                               concepts=concepts)
    catalog_path = os.path.join(out_dir, "catalog.jsonl")
    inter_path = os.path.join(out_dir, "interactions.jsonl")
    write_catalog(catalog_path, items)
    write_interactions(inter_path, records)
    manifest.checksums = {
        "catalog.jsonl": _sha256_file(catalog_path),
        "interactions.jsonl": _sha256_file(inter_path),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        obj = asdict(manifest)
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return manifest


def read_manifest(path) -> DatasetManifest:
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    pref = PreferenceModel(**obj.pop("preference"))
    return DatasetManifest(preference=pref, **obj)
