"""End-to-end smoke test of the forge_py extension module.

Build and install first, e.g. `maturin develop -m crates/py/Cargo.toml`,
then run `python python/smoke_test.py`.
"""

import sys
import tempfile
from pathlib import Path

import forge_py as fp

TRAIN = {"epochs": 4}
DISTILL = {"iterations": 30, "ipc": 4}
EVAL = {"iterations": 40}


def main() -> int:
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        data = root / "data"
        tasks = fp.generate_data(str(data), seed=0)
        assert tasks == ["B-toy", "L-toy", "M-toy"], tasks

        repo = fp.Repository.init(str(root / "repo"), strategy="fusion", seed=0)
        base = repo.base()
        assert base.hash == repo.config["base_id"]

        commits = []
        for name in tasks:
            cfg = dict(repo.train_config(seed=1), **TRAIN)
            plugin, metrics = fp.train_branch(str(data), name, base, cfg)
            assert 0.0 <= metrics["acc"] <= 1.0
            distilled, dmetrics = fp.distill_task(
                str(data), name, base, dict(DISTILL, train=cfg), dict(EVAL, train=cfg)
            )
            assert distilled.task == name and len(distilled) > 0
            # Round trip through bytes keeps the content address.
            assert fp.PluginModule.from_bytes(plugin.to_bytes()).id == plugin.id
            commits.append(repo.commit("smoke", str(data), name, plugin, distilled, {"acc": metrics["acc"]}))
            print(f"{name}: branch acc {metrics['acc']:.3f}, distilled-only acc {dmetrics['acc']:.3f}")

        records = repo.merge_all()
        assert [r["round"] for r in records] == [1, 2, 3]
        assert repo.merge_next() is None

        item = repo.main_item()
        assert item.round == 3 and item.strategy == "fusion"
        assert repo.verify_replay().id == item.id
        assert repo.checkout(3).to_bytes() == item.to_bytes()

        report = repo.evaluate(str(data))
        print({t["task"]: round(t["acc"], 3) for t in report["tasks"]}, "avg", round(report["avg_acc"], 3))

        emb = base.embed([[0.0] * base.input_dim], item.entries()[0][0])
        assert len(emb[0]) == base.embed_dim

        try:
            repo.checkout(9)
        except fp.ValidationError as e:
            print("out-of-range checkout rejected:", e)
        else:
            raise AssertionError("checkout past the head must fail")
    print("smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
