"""Run every CLI subcommand into one directory (shared by the CLI and acceptance tests)."""
from __future__ import annotations

import contextlib
import io
from pathlib import Path

from concordia.harness.cli import main

RUN_CONFIG = """[experiment]
name = cli
seed = 1
fractions = 0.5, 1.0
baseline = yes

[generator]
kind = chain
n_scenes = 8

[training]
epochs = 1
"""

FACTS = "Close\tb1\tb2\nClose\tb2\tb1\nDoing\tb1\tcrossing\t0.8\n"
RULES = "predicate: Close/2 closed .\npredicate: Doing/2 open .\n1.0 :: Doing(B1, A) & Close(B1, B2) -> Doing(B2, A) .\n"


def cli(*argv: str) -> tuple[int, str, str]:
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main(list(argv))
    return code, out.getvalue(), err.getvalue()


def run_all(root: Path) -> dict[str, str]:
    """Every subcommand once; returns stdout per command.  Fails loudly on a nonzero exit."""
    root.mkdir(parents=True, exist_ok=True)
    (root / "small.rules").write_text(RULES)
    (root / "small.tsv").write_text(FACTS)
    (root / "run.ini").write_text(RUN_CONFIG)
    chain = root / "chain"
    steps = {
        "synth-chain": ["synth-chain", "--seed", "3", "--distractors", "2", "--out", str(chain)],
        "synth-recommend": ["synth-recommend", "--seed", "3", "--n-users", "10", "--n-items", "10",
                            "--out", str(root / "rec")],
        "parse": ["parse", "--rules", str(chain / "theory.rules"), "--out", str(root / "parse")],
        "ground": ["ground", "--rules", str(root / "small.rules"), "--facts", str(root / "small.tsv"),
                   "--out", str(root / "ground")],
        "infer": ["infer", "--rules", str(root / "small.rules"), "--facts", str(root / "small.tsv"),
                  "--out", str(root / "infer")],
        "infer-boolean": ["infer", "--semantics", "boolean", "--rules", str(root / "small.rules"),
                          "--facts", str(root / "small.tsv"), "--out", str(root / "infer-boolean")],
        "learn-weights": ["learn-weights", "--rules", str(chain / "theory.rules"), "--facts", str(chain / "facts.tsv"),
                          "--data", str(chain / "data.tsv"), "--config", str(chain / "mapping.ini"), "--epochs", "1",
                          "--seed", "2", "--out", str(root / "learn")],
        "train": ["train", "--rules", str(chain / "theory.rules"), "--facts", str(chain / "facts.tsv"),
                  "--data", str(chain / "data.tsv"), "--config", str(chain / "mapping.ini"), "--epochs", "1",
                  "--seed", "2", "--priors", "on", "--out", str(root / "train")],
        "eval": ["eval", "--model", str(root / "train" / "model"), "--facts", str(chain / "facts.tsv"),
                 "--data", str(chain / "data.tsv"), "--config", str(chain / "mapping.ini"), "--out", str(root / "eval")],
        "run": ["run", "--config", str(root / "run.ini"), "--out", str(root / "run")],
    }
    stdout = {}
    for name, argv in steps.items():
        code, out, err = cli(*argv)
        if code != 0:
            raise AssertionError(f"concordia {name} exited {code}: {err}")
        stdout[name] = out
    return stdout


def artifacts(root: Path) -> dict[str, bytes]:
    """Relative path -> bytes of every file under ``root``."""
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}
