"""Full CLI pipeline on a small synthetic cohort, shared by the CLI and acceptance suites."""

from trajtpp.cli import run


def run_pipeline(root, seed=5, n_patients=160, epochs=2):
    d = {k: str(root / k) for k in ("synth", "prep", "train", "bt", "emb", "out", "cost", "gain", "match", "plots")}
    s = d["synth"]
    steps = [
        ["synth", "--n-patients", str(n_patients), "--out", s],
        ["prep", "--events", f"{s}/events.csv", "--vocab", f"{s}/vocab.json", "--out", d["prep"]],
        ["train", "--events", f"{s}/events.csv", "--vocab", f"{s}/vocab.json", "--prep", d["prep"],
         "--epochs", str(epochs), "--batch-size", "64", "--mc-samples", "3", "--layers", "1", "--out", d["train"]],
        ["backtest", "--events", f"{s}/events.csv", "--vocab", f"{s}/vocab.json", "--prep", d["prep"],
         "--model", f"{d['train']}/model.ptpp", "--types", "risk,outcome", "--out", d["bt"]],
        ["embed", "--events", f"{s}/events.csv", "--vocab", f"{s}/vocab.json", "--prep", d["prep"],
         "--model", f"{d['train']}/model.ptpp", "--cohort", f"{s}/cohort.csv", "--out", d["emb"]],
        ["fit-outcome", "--embeddings", f"{d['emb']}/embeddings.csv", "--cohort", f"{s}/cohort.csv",
         "--outcome", "outcome_planted", "--out", d["out"]],
        ["fit-cost", "--embeddings", f"{d['emb']}/embeddings.csv", "--cohort", f"{s}/cohort.csv",
         "--cost", "cost_cv", "--out", d["cost"]],
        ["match", "--cohort", f"{s}/cohort.csv", "--out", d["match"]],
        ["gain", "--scores", f"{d['cost']}/predictions.csv", "--scores-b", f"{d['cost']}/predictions.csv",
         "--costs", f"{d['cost']}/predictions.csv", "--iters", "100", "--out", d["gain"]],
        ["plot-data", "--run", d["train"], d["bt"], d["emb"], d["out"], d["match"], d["gain"], "--out", d["plots"]],
    ]
    for argv in steps:
        code = run(argv + ["--seed", str(seed)])
        if code != 0:
            raise RuntimeError(f"{argv[0]} exited with {code}")
    return d


DETERMINISM_FILES = [
    ("train", "model.ptpp"),
    ("train", "epoch_log.csv"),
    ("bt", "confusion.csv"),
    ("bt", "metrics.json"),
    ("emb", "embeddings.csv"),
    ("out", "metrics.json"),
    ("cost", "metrics.json"),
    ("cost", "predictions.csv"),
    ("match", "match_report.csv"),
    ("match", "matched_pairs.csv"),
    ("gain", "perm_test.json"),
]
