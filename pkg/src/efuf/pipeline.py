"""Pipeline stages behind the CLI subcommands.

Each stage reads its upstream artifacts (by config key or by the
``<out_dir>/<stage>/`` convention), writes its own artifacts plus a
``<stage>_meta.json`` sidecar with the config hash, input digests, and
timings. Timings live only in the sidecar, so rerunning a stage with the
same config and seed reproduces its artifacts byte for byte.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .config import RunConfig
from .corpus import CorpusManifest, SyntheticSceneBackend
from .curation import curate, read_datasets, write_datasets
from .errors import ConfigurationError, MissingArtifactError
from .extraction import (
    CaptionRecord,
    LexiconExtractorBackend,
    ObjectMention,
    RemoteExtractorBackend,
    RemoteExtractorConfig,
    extract_objects,
)
from .lexicon import Lexicon
from .metrics import (
    EvalReport,
    ToyModelScorer,
    annotate_with_lexicon,
    chair,
    corpus_bleu,
    density_export,
    fluency,
    threshold_purity,
    welch_ttest,
    write_histogram_csv,
)
from .model import ToyMLLM, ToyTokenizer, greedy_caption, load_checkpoint, save_checkpoint, select_trainable
from .plots import save_density_figure, save_loss_curves, save_metric_bars
from .scoring import HashEmbeddingBackend, ScoreCache, score_object
from .training import LossWeights, make_optimizer, run_epoch, sft_datasets
from .util import file_digest, read_jsonl, substream, write_json, write_jsonl


def _manifest(config: RunConfig) -> CorpusManifest:
    raw = config.values.get("manifest", "")
    if not raw:
        raise ConfigurationError("config key 'manifest' is required")
    return CorpusManifest.load(raw)


def _lexicon(config: RunConfig) -> Lexicon:
    path = config.get_path("lexicon_path")
    return Lexicon.load(path) if path else Lexicon.bundled()


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(path, producer)
    return path


def _artifact_meta(config: RunConfig, stage: str, fmt: str) -> dict:
    return {"config_hash": config.config_hash(), "seed": config.seed, "stage": stage, "format": fmt}


def _write_stage_meta(
    out: Path, stage: str, config: RunConfig, inputs: dict[str, Path], started: float, extra: dict | None = None
) -> None:
    meta = {
        "stage": stage,
        "config_hash": config.config_hash(),
        "seed": config.seed,
        "inputs": {name: {"path": str(p), "sha256_12": file_digest(p)} for name, p in inputs.items()},
        "elapsed_s": round(time.time() - started, 3),
    }
    if extra:
        meta.update(extra)
    write_json(out / f"{stage}_meta.json", meta)


def _split_ids(manifest: CorpusManifest, which: str, all_ids: list[str]) -> list[str]:
    if which == "all":
        return all_ids
    split = manifest.split()
    if which not in split:
        raise ConfigurationError(f"unknown split {which!r}; split file has {sorted(split)}")
    wanted = set(split[which])
    return [i for i in all_ids if i in wanted]


def _embedding_backend(config: RunConfig, manifest: CorpusManifest):
    kind = config.get("backend")
    dim = config.get_int("backend_dim")
    if kind == "stub":
        return HashEmbeddingBackend(dim=dim)
    if kind == "scene":
        return SyntheticSceneBackend(
            manifest.gt_objects(), _lexicon(config), dim=dim, noise=config.get_float("backend_noise")
        )
    raise ConfigurationError(f"unknown embedding backend {kind!r}")


def _extractor_backend(config: RunConfig):
    kind = config.get("extractor")
    if kind == "lexicon":
        return LexiconExtractorBackend(_lexicon(config))
    if kind == "remote":
        endpoint, model = config.get("remote_endpoint"), config.get("remote_model")
        if not endpoint or not model:
            raise ConfigurationError("remote extractor needs remote_endpoint and remote_model")
        return RemoteExtractorBackend(
            RemoteExtractorConfig(endpoint=endpoint, model=model, token=os.environ.get("EFUF_EXTRACTOR_TOKEN"))
        )
    raise ConfigurationError(f"unknown extractor {kind!r}")


def _cached_features(manifest: CorpusManifest):
    cache: dict[str, np.ndarray] = {}

    def get(image_id: str) -> np.ndarray:
        if image_id not in cache:
            cache[image_id] = manifest.feature(image_id)
        return cache[image_id]

    return get


# ---------------------------------------------------------------------------
# generate


def run_generate(config: RunConfig, out: str | None = None) -> dict:
    started = time.time()
    manifest = _manifest(config)
    out_dir = config.stage_dir("generate", out)
    ckpt = config.get_path("gen_checkpoint")
    if ckpt is None:
        raise ConfigurationError("config key 'gen_checkpoint' is required for generate")
    _require(ckpt, producer="train")
    model, tokenizer, _ = load_checkpoint(ckpt)

    prompt = config.get("gen_prompt")
    max_tokens = config.get_int("gen_max_tokens")
    all_ids = [rec["image_id"] for rec in read_jsonl(manifest.captions_path)]
    ids = _split_ids(manifest, config.get("gen_split"), all_ids)

    captions, errors = [], []
    for image_id in ids:
        try:
            caption = greedy_caption(model, tokenizer, manifest.feature(image_id), prompt, max_tokens)
            if not caption:
                raise ValueError("model produced an empty caption")
            captions.append({"image_id": image_id, "prompt": prompt, "caption": caption})
        except Exception as exc:  # per-image failure is recorded, run continues
            errors.append({"image_id": image_id, "error": str(exc)})

    write_jsonl(out_dir / "captions.jsonl", captions, meta=_artifact_meta(config, "generate", "captions/v1"))
    write_jsonl(out_dir / "generate_errors.jsonl", errors, meta=_artifact_meta(config, "generate", "errors/v1"))
    _write_stage_meta(
        out_dir,
        "generate",
        config,
        {"checkpoint": ckpt, "captions_in": manifest.captions_path},
        started,
        extra={"n_captions": len(captions), "n_errors": len(errors)},
    )
    return {"out": out_dir, "n_captions": len(captions), "n_errors": len(errors)}


# ---------------------------------------------------------------------------
# score


def _gold_lookup(manifest: CorpusManifest, lexicon: Lexicon):
    try:
        gold = manifest.gold_annotations()
    except FileNotFoundError:
        return lambda image_id, phrase: None

    by_image: dict[str, dict[str, int]] = {}
    for image_id, pairs in gold.items():
        table: dict[str, int] = {}
        for phrase, label in pairs:
            table.setdefault(phrase.lower(), label)
            canon = lexicon.canonical(phrase)
            if canon:
                table.setdefault(canon, label)
        by_image[image_id] = table

    def lookup(image_id: str, phrase: str) -> int | None:
        table = by_image.get(image_id, {})
        direct = table.get(phrase.lower())
        if direct is not None:
            return direct
        canon = lexicon.canonical(phrase)
        return table.get(canon) if canon else None

    return lookup


def run_score(config: RunConfig, out: str | None = None) -> dict:
    started = time.time()
    manifest = _manifest(config)
    out_dir = config.stage_dir("score", out)
    captions_file = _require(config.out_dir / "generate" / "captions.jsonl", producer="generate")

    lexicon = _lexicon(config)
    extractor = _extractor_backend(config)
    backend = _embedding_backend(config, manifest)
    window_config = config.window_config()
    template = config.phrase_template()
    cache = ScoreCache(out_dir / "score_cache.jsonl")
    gold = _gold_lookup(manifest, lexicon)

    records = [
        CaptionRecord(
            image_id=rec["image_id"],
            prompt=rec.get("prompt", ""),
            caption=rec["caption"],
            image=manifest.resolve_image(rec["image_id"]),
        )
        for rec in read_jsonl(captions_file)
    ]

    dropped: list[str] = []

    def score_record(record: CaptionRecord) -> list[dict]:
        rows = []
        for mention in extract_objects(extractor, record, dropped=dropped):
            rel = score_object(
                backend,
                record.image,
                mention.phrase,
                window_config,
                template=template,
                cache=cache,
                image_id=record.image_id,
            )
            row = {
                "image_id": record.image_id,
                "phrase": mention.phrase,
                "start": mention.start,
                "end": mention.end,
                "score": rel.value,
            }
            label = gold(record.image_id, mention.phrase)
            if label is not None:
                row["gold_label"] = label
            rows.append(row)
        return rows

    workers = config.get_int("score_workers")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_record = list(pool.map(score_record, records))  # merge preserves input order
    else:
        per_record = [score_record(r) for r in records]
    rows = [row for rows_ in per_record for row in rows_]

    write_jsonl(out_dir / "mentions.jsonl", rows, meta=_artifact_meta(config, "score", "mentions/v1"))
    _write_stage_meta(
        out_dir,
        "score",
        config,
        {"captions": captions_file},
        started,
        extra={"n_mentions": len(rows), "n_dropped_phrases": len(dropped), "backend_id": backend.backend_id},
    )
    return {"out": out_dir, "n_mentions": len(rows), "n_dropped": len(dropped)}


# ---------------------------------------------------------------------------
# curate


def _load_scored_mentions(path: Path) -> dict[str, list[tuple[ObjectMention, float]]]:
    scored: dict[str, list[tuple[ObjectMention, float]]] = {}
    for rec in read_jsonl(path):
        mention = ObjectMention(
            phrase=rec["phrase"], start=rec["start"], end=rec["end"], gold_label=rec.get("gold_label")
        )
        scored.setdefault(rec["image_id"], []).append((mention, float(rec["score"])))
    return scored


def run_curate(config: RunConfig, out: str | None = None) -> dict:
    started = time.time()
    out_dir = config.stage_dir("curate", out)
    captions_file = _require(config.out_dir / "generate" / "captions.jsonl", producer="generate")
    mentions_file = _require(config.out_dir / "score" / "mentions.jsonl", producer="score")

    records = [
        CaptionRecord(image_id=rec["image_id"], prompt=rec.get("prompt", ""), caption=rec["caption"])
        for rec in read_jsonl(captions_file)
    ]
    scored = _load_scored_mentions(mentions_file)
    datasets = curate(records, scored, config.thresholds(), rng=substream(config.seed, "curation"))
    sizes = write_datasets(datasets, out_dir, meta=_artifact_meta(config, "curate", "unlearning-dataset/v1"))
    _write_stage_meta(
        out_dir, "curate", config, {"captions": captions_file, "mentions": mentions_file}, started, extra=sizes
    )
    return {"out": out_dir, **sizes}


# ---------------------------------------------------------------------------
# train


def run_train(config: RunConfig, out: str | None = None) -> dict:
    started = time.time()
    manifest = _manifest(config)
    out_dir = config.stage_dir("train", out)
    mode = config.get("train_mode")
    train_config = config.train_config()
    inputs: dict[str, Path] = {}

    if mode == "sft":
        all_records = list(read_jsonl(manifest.captions_path))
        ids = set(_split_ids(manifest, "train", [r["image_id"] for r in all_records]))
        datasets = sft_datasets([r for r in all_records if r["image_id"] in ids])
        weights = LossWeights(lambda1=0.0, lambda2=1.0)  # plain CE on full captions
        texts = [r["caption"] for r in all_records] + [r.get("prompt", "") for r in all_records]
        tokenizer = ToyTokenizer.from_corpus(texts)
        model = ToyMLLM(
            config.model_config(manifest.feature_dim), tokenizer.vocab_size, seed=config.get_int("model_seed")
        )
        inputs["captions"] = manifest.captions_path
    elif mode == "efuf":
        curate_dir = config.out_dir / "curate"
        _require(curate_dir / "d_pos.jsonl", producer="curate")
        datasets = read_datasets(curate_dir)
        weights = config.loss_weights()
        init = config.get_path("init_checkpoint")
        if init is None:
            raise ConfigurationError("config key 'init_checkpoint' is required for train_mode = efuf")
        _require(init, producer="train (sft mode)")
        model, tokenizer, _ = load_checkpoint(init)
        inputs.update(
            {
                "d_pos": curate_dir / "d_pos.jsonl",
                "d_neg": curate_dir / "d_neg.jsonl",
                "d_sent": curate_dir / "d_sent.jsonl",
                "init_checkpoint": init,
            }
        )
    else:
        raise ConfigurationError(f"unknown train_mode {mode!r}")

    select_trainable(model, list(train_config.trainable))
    optimizer = make_optimizer(model, train_config)
    rng = substream(config.seed, "trainer")
    features = _cached_features(manifest)

    reports = []
    for _ in range(train_config.epochs):
        reports.extend(
            run_epoch(
                model,
                tokenizer,
                features,
                datasets,
                weights,
                train_config,
                optimizer,
                rng,
                start_step=len(reports),
            )
        )

    write_jsonl(
        out_dir / "train_log.jsonl",
        (r.to_record() for r in reports),
        meta=_artifact_meta(config, "train", "step-report/v1"),
    )
    save_checkpoint(
        model,
        tokenizer,
        out_dir / "checkpoint.json",
        meta={"config_hash": config.config_hash(), "seed": config.seed, "train_mode": mode},
    )
    save_loss_curves(out_dir / "loss_curve.png", reports, provenance=f"config_hash={config.config_hash()}")
    _write_stage_meta(
        out_dir, "train", config, inputs, started, extra={"steps": len(reports), "mode": mode}
    )
    return {"out": out_dir, "steps": len(reports), "final": reports[-1].to_record() if reports else None}


# ---------------------------------------------------------------------------
# eval


def _evaluate_checkpoint(
    config: RunConfig,
    manifest: CorpusManifest,
    model: ToyMLLM,
    tokenizer: ToyTokenizer,
    ids: list[str],
    lexicon: Lexicon,
    scorer,
) -> tuple[EvalReport, list[dict]]:
    prompt = config.get("gen_prompt")
    max_tokens = config.get_int("gen_max_tokens")
    gt = manifest.gt_objects()
    refs = manifest.references()

    generated = []
    for image_id in ids:
        caption = greedy_caption(model, tokenizer, manifest.feature(image_id), prompt, max_tokens)
        generated.append({"image_id": image_id, "prompt": prompt, "caption": caption})

    responses = [
        annotate_with_lexicon(g["image_id"], g["caption"], gt[g["image_id"]], lexicon) for g in generated
    ]
    chair_s, chair_i = chair(responses)
    pairs = [(g["caption"], refs[g["image_id"]]) for g in generated]
    fluencies = [fluency(scorer, g["caption"]) for g in generated if g["caption"]]

    report = EvalReport(
        chair_s=chair_s,
        chair_i=chair_i,
        bleu1=corpus_bleu(pairs, 1),
        bleu2=corpus_bleu(pairs, 2),
        bleu4=corpus_bleu(pairs, 4),
        fluency=sum(fluencies) / len(fluencies) if fluencies else None,
        informativeness=None,  # no judge client bundled
        n_responses=len(responses),
        n_objects=sum(len(r.mentions) for r in responses),
    )
    return report, generated


def run_eval(config: RunConfig, out: str | None = None) -> dict:
    started = time.time()
    manifest = _manifest(config)
    out_dir = config.stage_dir("eval", out)
    ckpt = config.get_path("eval_checkpoint") or config.out_dir / "train" / "checkpoint.json"
    _require(ckpt, producer="train")
    model, tokenizer, _ = load_checkpoint(ckpt)

    baseline_path = config.get_path("eval_baseline")
    baseline = None
    if baseline_path is not None:
        _require(baseline_path, producer="train")
        b_model, b_tokenizer, _ = load_checkpoint(baseline_path)
        if b_tokenizer.vocabulary != tokenizer.vocabulary:
            raise ConfigurationError(
                "refusing to compare checkpoints with different tokenizer vocabularies: "
                f"{ckpt} vs {baseline_path}"
            )
        baseline = (b_model, b_tokenizer)

    lexicon = _lexicon(config)
    all_ids = [rec["image_id"] for rec in read_jsonl(manifest.captions_path)]
    ids = _split_ids(manifest, config.get("eval_split"), all_ids)

    # Fluency reference: the baseline checkpoint's language model when given,
    # else the evaluated model itself (recorded in the report metadata).
    scorer = ToyModelScorer(*baseline) if baseline else ToyModelScorer(model, tokenizer)

    report, generated = _evaluate_checkpoint(config, manifest, model, tokenizer, ids, lexicon, scorer)
    payload = {
        "model": report.to_record(),
        "metadata": {
            "config_hash": config.config_hash(),
            "seed": config.seed,
            "dataset_hash": file_digest(manifest.captions_path),
            "checkpoint": str(ckpt),
            "checkpoint_hash": file_digest(ckpt),
            "fluency_scorer": scorer.scorer_id + ("-baseline" if baseline else "-self"),
            "split": config.get("eval_split"),
        },
    }
    named = {"model": report.to_record()}
    if baseline:
        b_report, _ = _evaluate_checkpoint(config, manifest, *baseline, ids, lexicon, scorer)
        payload["baseline"] = b_report.to_record()
        payload["metadata"]["baseline_checkpoint"] = str(baseline_path)
        payload["metadata"]["baseline_hash"] = file_digest(baseline_path)
        named = {"baseline": b_report.to_record(), "model": report.to_record()}

    write_jsonl(out_dir / "eval_captions.jsonl", generated, meta=_artifact_meta(config, "eval", "captions/v1"))
    write_json(out_dir / "eval_report.json", payload)
    save_metric_bars(out_dir / "metrics.png", named, provenance=f"config_hash={config.config_hash()}")
    _write_stage_meta(out_dir, "eval", config, {"checkpoint": ckpt}, started)
    return {"out": out_dir, "report": payload}


# ---------------------------------------------------------------------------
# prelim


def run_prelim(config: RunConfig, out: str | None = None) -> dict:
    started = time.time()
    out_dir = config.stage_dir("prelim", out)
    source = config.get("prelim_source")
    inputs: dict[str, Path] = {}

    if source == "normal":
        rng = substream(config.seed, "prelim")
        n = config.get_int("prelim_n")
        clean = config.get_float("prelim_mean0") + config.get_float("prelim_std0") * rng.standard_normal(n)
        hal = config.get_float("prelim_mean1") + config.get_float("prelim_std1") * rng.standard_normal(n)
        clean, hal = clean.tolist(), hal.tolist()
    elif source == "mentions":
        mentions_file = _require(config.out_dir / "score" / "mentions.jsonl", producer="score")
        inputs["mentions"] = mentions_file
        clean, hal = [], []
        for rec in read_jsonl(mentions_file):
            label = rec.get("gold_label")
            if label == 0:
                clean.append(float(rec["score"]))
            elif label == 1:
                hal.append(float(rec["score"]))
        if len(clean) < 2 or len(hal) < 2:
            raise ValueError(
                "prelim needs at least two gold-labeled scores per group; "
                f"got {len(clean)} non-hallucinated / {len(hal)} hallucinated"
            )
    else:
        raise ConfigurationError(f"unknown prelim_source {source!r}")

    t, p = welch_ttest(clean, hal)
    thresholds = config.thresholds()
    labeled = [(s, 0) for s in clean] + [(s, 1) for s in hal]
    frac_hal_above_t0, _ = threshold_purity(labeled, thresholds.t0)
    _, frac_clean_below_t1 = threshold_purity(labeled, thresholds.t1)

    bins = config.get_int("prelim_bins")
    groups = {"non_hallucinated": clean, "hallucinated": hal}
    provenance = {"config_hash": config.config_hash(), "seed": config.seed}
    for name, scores in groups.items():
        write_histogram_csv(out_dir / f"hist_{name}.csv", density_export(scores, bins), provenance=provenance)
    save_density_figure(
        out_dir / "score_density.png", groups, bins=bins,
        provenance=f"config_hash={config.config_hash()}",
    )

    stats = {
        "groups": {
            name: {
                "n": len(scores),
                "mean": float(np.mean(scores)),
                "std": float(np.std(scores, ddof=1)),
            }
            for name, scores in groups.items()
        },
        "t_statistic": t,
        "p_value": p,
        "purity": {
            "hallucinated_fraction_above_t0": frac_hal_above_t0,
            "non_hallucinated_fraction_below_t1": frac_clean_below_t1,
            "t0": thresholds.t0,
            "t1": thresholds.t1,
        },
        "source": source,
        "config_hash": config.config_hash(),
        "seed": config.seed,
    }
    write_json(out_dir / "prelim_stats.json", stats)
    _write_stage_meta(out_dir, "prelim", config, inputs, started)
    return {"out": out_dir, "stats": stats}
