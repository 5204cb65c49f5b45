"""Smoke test for the lasyn_py extension.

Build first:
    cargo build --release -p lasyn-python --features extension-module
then run:
    python3 crates/python/python/smoke_test.py

The built library is copied next to a temp dir as ``lasyn_py.so`` so it can
be imported without installing. Set LASYN_PY_LIB to point at another build.
"""

import os
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parents[3]


def import_extension(tmp):
    lib = os.environ.get("LASYN_PY_LIB")
    if lib is None:
        for name in ("liblasyn_py.so", "liblasyn_py.dylib", "lasyn_py.dll"):
            cand = ROOT / "target" / "release" / name
            if cand.exists():
                lib = str(cand)
                break
    if lib is None:
        sys.exit("lasyn_py library not found; build it first (see module docstring)")
    suffix = ".pyd" if lib.endswith(".dll") else ".so"
    shutil.copy(lib, Path(tmp) / ("lasyn_py" + suffix))
    sys.path.insert(0, tmp)
    import lasyn_py

    return lasyn_py


def main():
    with tempfile.TemporaryDirectory() as tmp:
        lp = import_extension(tmp)

        assert lp.levenshtein(list("kitten"), list("sitting")) == 3
        assert lp.distinct1([["a", "b", "a"]]) == 2 / 3
        s = ["the", "cat", "sat", "on", "the", "mat"]
        assert lp.bleu([s], [s]) == 100.0

        pairs = lp.generate(3, 7)
        assert len(pairs) == 3 and all(len(t) == len(g) for _, t, g in pairs)
        assert pairs == lp.generate(3, 7)

        err = lp.grad_check(samples=50)
        assert err <= 1e-4, err

        data = Path(tmp) / "data"
        summary = lp.gen_data(str(data), n=600, seed=3)
        assert summary["tags"] == ["DET", "ADJ", "NOUN", "VERB", "ADV", "PUNCT"]

        cfg = Path(tmp) / "c.toml"
        cfg.write_text("[train]\nwarmup_steps = 20\nvalid_decode_limit = 20\n")
        log = lp.train(str(data), str(Path(tmp) / "run"), config=str(cfg), epochs=1)
        assert len(log) == 1 and log[0]["train_nll"] > 0

        tr = lp.Translator(str(Path(tmp) / "run" / "model.ckpt"))
        assert tr.tag_vocab_size == 6
        test = [line.split("\t") for line in (data / "test.tsv").read_text().splitlines()]
        out = tr.translate([c[0] for c in test[:5]], beam=3)
        assert len(out) == 5 and all(set(o) == {"tokens", "tags", "score"} for o in out)
        fixed = tr.translate([c[0] for c in test[:5]], tags=[c[2] for c in test[:5]])
        for o, c in zip(fixed, test[:5]):
            assert o["tags"] == c[2].split()

        try:
            lp.Translator(str(Path(tmp) / "missing.ckpt"))
        except OSError:
            pass
        else:
            raise AssertionError("missing checkpoint should raise")

    print("lasyn_py smoke test: ok")


if __name__ == "__main__":
    main()
