"""Flat ``key = value`` configuration with ``[section]`` headers.

Every key has a documented default below; unknown sections or keys are
rejected.  ``section.key = value`` lines are accepted outside any header.
The resolved form (every key, canonical formatting) is what runs echo to
``config.resolved`` and what the config hash is computed from.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

from .losses import KAPPA_CPC, KAPPA_GCPC
from .nets import Topology
from .pipeline import FinetuneLoss, InitSpec, Scheme, TrainConfig
from .synthdata import CorpusConfig


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


# section -> ordered (key, type, default)
SCHEMA: dict[str, list[tuple[str, type, object]]] = {
    "corpus": [
        ("seed", int, 0),
        ("n_phones", int, 8),
        ("dim", int, 16),
        ("mean_norm", float, 2.0),
        ("mean_duration", float, 4.0),
        ("min_phones", int, 3),
        ("max_phones", int, 8),
        ("sigma", float, 0.5),
        ("n_pretrain", int, 2000),
        ("n_train", int, 1000),
        ("n_test", int, 200),
    ],
    "topology": [
        ("enc_layers", int, 2),
        ("enc_width", int, 32),
        ("ar_layers", int, 1),
        ("ar_width", int, 64),
        ("genc_width", int, 32),
        ("prior_layers", int, 1),
        ("prior_width", int, 32),
        ("pred_width", int, 32),
        ("frame_stack", int, 1),
    ],
    "contrastive": [
        ("K", int, 4),
        ("kappa", str, "auto"),
        ("kappa_cpc", float, KAPPA_CPC),
        ("kappa_gcpc", float, KAPPA_GCPC),
        ("n_neg", int, 8),
        ("target_mode", str, "auto"),
        ("genc_depth", int, 2),
        ("include_positive", bool, True),
        ("redraw_per_step", bool, False),
    ],
    "optim": [
        ("lr", float, 1e-3),
        ("batch_size", int, 8),
        ("prior_steps", int, 500),
        ("pretrain_steps", int, 2000),
        ("finetune_steps", int, 2000),
        ("prior_holdout", float, 0.1),
    ],
    "run": [
        ("scheme", str, "gcpc"),
        ("finetune_loss", str, "rnnt"),
        ("init_ar_layers", int, -1),
        ("init_frozen", bool, False),
        ("seed", int, 0),
        ("seeds", int, 5),
        ("emission_cap", int, 3),
        ("analysis_frames", int, 4000),
    ],
}

_TYPES = {(s, k): t for s, rows in SCHEMA.items() for k, t, _ in rows}


def _parse_value(key: str, typ: type, raw: str):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(key, f"expected {typ.__name__}, got {raw!r}") from None


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def parse_text(text: str) -> dict[str, dict[str, object]]:
    """Parse raw text into {section: {key: typed value}} (only keys present)."""
    out: dict[str, dict[str, object]] = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].split(";", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError(section, f"unknown section (line {lineno})")
            continue
        if "=" not in line:
            raise ConfigError(line, f"expected key = value (line {lineno})")
        key, raw = (p.strip() for p in line.split("=", 1))
        sec = section
        if sec is None or "." in key:
            if "." not in key:
                raise ConfigError(key, f"key outside any section (line {lineno})")
            sec, key = key.split(".", 1)
        full = f"{sec}.{key}"
        if (sec, key) not in _TYPES:
            raise ConfigError(full, "unknown key")
        out.setdefault(sec, {})[key] = _parse_value(full, _TYPES[(sec, key)], raw)
    return out


@dataclass(frozen=True)
class Config:
    values: dict

    def __getitem__(self, dotted: str):
        sec, key = dotted.split(".", 1)
        return self.values[sec][key]

    # -- derived objects
    def corpus_config(self) -> CorpusConfig:
        v = dict(self.values["corpus"])
        v.pop("seed")
        return CorpusConfig(**v)

    @property
    def corpus_seed(self) -> int:
        return self["corpus.seed"]

    def topology(self) -> Topology:
        return Topology(input_dim=self["corpus.dim"], genc_depth=self["contrastive.genc_depth"],
                        **self.values["topology"])

    def train_config(self) -> TrainConfig:
        c, o = self.values["contrastive"], self.values["optim"]
        return TrainConfig(lr=o["lr"], batch_size=o["batch_size"], prior_steps=o["prior_steps"],
                           pretrain_steps=o["pretrain_steps"], finetune_steps=o["finetune_steps"],
                           prior_holdout=o["prior_holdout"], emission_cap=self["run.emission_cap"],
                           K=c["K"], n_neg=c["n_neg"], kappa_cpc=c["kappa_cpc"], kappa_gcpc=c["kappa_gcpc"],
                           include_positive=c["include_positive"], redraw_per_step=c["redraw_per_step"],
                           analysis_frames=self["run.analysis_frames"])

    @property
    def scheme(self) -> Scheme:
        return Scheme(self["run.scheme"])

    @property
    def finetune_loss(self) -> FinetuneLoss:
        return FinetuneLoss(self["run.finetune_loss"])

    def init_spec(self) -> InitSpec:
        n = self["run.init_ar_layers"]
        return InitSpec(ar_layers=None if n < 0 else n, frozen=self["run.init_frozen"])

    def with_overrides(self, **dotted) -> "Config":
        text = self.resolved_text() + "".join(f"{k} = {_format_value(v)}\n" for k, v in dotted.items())
        return load_config(text)

    def resolved_text(self) -> str:
        lines = []
        for sec, rows in SCHEMA.items():
            lines.append(f"[{sec}]")
            for key, _, _ in rows:
                lines.append(f"{key} = {_format_value(self.values[sec][key])}")
            lines.append("")
        return "\n".join(lines)

    def hash(self) -> str:
        return hashlib.sha256(self.resolved_text().encode()).hexdigest()


def _validate(v: dict) -> None:
    try:
        scheme = Scheme(v["run"]["scheme"])
    except ValueError:
        raise ConfigError("run.scheme", f"unknown scheme {v['run']['scheme']!r}") from None
    try:
        FinetuneLoss(v["run"]["finetune_loss"])
    except ValueError:
        raise ConfigError("run.finetune_loss", f"unknown loss {v['run']['finetune_loss']!r}") from None
    c = v["contrastive"]
    for key in ("kappa_cpc", "kappa_gcpc"):
        if not c[key] > 0:
            raise ConfigError(f"contrastive.{key}", "kappa must be > 0")
    if c["K"] < 1:
        raise ConfigError("contrastive.K", "must be >= 1")
    if c["n_neg"] < 1:
        raise ConfigError("contrastive.n_neg", "must be >= 1")
    if c["genc_depth"] not in (0, 1, 2, 3):
        raise ConfigError("contrastive.genc_depth", "must be 0, 1, 2 or 3")
    expected = {Scheme.CPC: "latent", Scheme.GCPC: "guidance"}.get(scheme)
    if c["target_mode"] not in ("auto", "latent", "guidance"):
        raise ConfigError("contrastive.target_mode", "must be auto, latent or guidance")
    if c["target_mode"] != "auto" and c["target_mode"] != expected:
        raise ConfigError("contrastive.target_mode", f"{c['target_mode']} contradicts scheme {scheme.value}")
    t = v["topology"]
    if t["enc_layers"] < 1 or t["ar_layers"] < 1 or t["frame_stack"] < 1:
        raise ConfigError("topology", "enc_layers, ar_layers and frame_stack must be >= 1")
    if v["run"]["init_ar_layers"] > t["ar_layers"]:
        raise ConfigError("run.init_ar_layers", "exceeds topology.ar_layers")
    o = v["optim"]
    if not o["lr"] > 0 or o["batch_size"] < 1:
        raise ConfigError("optim", "lr must be > 0 and batch_size >= 1")
    if v["run"]["seeds"] < 1:
        raise ConfigError("run.seeds", "need at least one seed")
    corpus = dict(v["corpus"])
    corpus.pop("seed")
    try:
        CorpusConfig(**corpus).validate()
    except ValueError as exc:
        raise ConfigError("corpus", str(exc)) from None


def load_config(source: str | Path | None = None) -> Config:
    """Resolve a config from a path, raw text, or None (all defaults).

    ``contrastive.kappa`` (default ``auto``) overrides the temperature of
    whichever contrastive loss the run's scheme uses and is folded into
    ``kappa_cpc`` / ``kappa_gcpc`` during resolution.
    """
    if source is None:
        text = ""
    elif isinstance(source, Path) or (isinstance(source, str) and source.strip() and "\n" not in source
                                      and "=" not in source and Path(source).is_file()):
        text = Path(source).read_text()
    else:
        text = str(source)
    given = parse_text(text)
    values = {sec: {k: given.get(sec, {}).get(k, d) for k, _, d in rows} for sec, rows in SCHEMA.items()}
    kappa = values["contrastive"]["kappa"]
    if kappa != "auto":
        try:
            kv = float(kappa)
        except ValueError:
            raise ConfigError("contrastive.kappa", f"expected a number or 'auto', got {kappa!r}") from None
        if not kv > 0:
            raise ConfigError("contrastive.kappa", f"kappa must be > 0, got {kv}")
        scheme = values["run"]["scheme"]
        if scheme in ("cpc", "cpc+gcpc"):
            values["contrastive"]["kappa_cpc"] = kv
        if scheme in ("gcpc", "cpc+gcpc"):
            values["contrastive"]["kappa_gcpc"] = kv
        values["contrastive"]["kappa"] = "auto"
    _validate(values)
    return Config(values)
