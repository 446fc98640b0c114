import json

import pytest

from admkd.config import ConfigError, load_config, parse_config


def minimal(**sections):
    doc = {
        "models": [{"name": "t", "role": "teacher", "preset": "tiny-b"},
                   {"name": "s", "role": "student", "stage_widths": [8, 16, 32]}],
        "data": {"source": "blobs", "classes": 3, "per_class": 4, "shape": [1, 8, 8]},
        "run": {"epochs": 2, "batch_size": 8},
    }
    for k, v in sections.items():
        doc[k] = {**doc.get(k, {}), **v}
    return doc


class TestParse:
    def test_defaults_applied(self):
        cfg = parse_config(minimal())
        d = cfg.distill_config()
        assert (d.tau, d.lam, d.alpha, d.beta, d.gamma) == (1.0, 1.0, 0.2, 0.6, 0.01)
        assert cfg.optim["momentum"] == 0.9 and cfg.run["mode"] == "online"
        assert cfg.data["noise_sigma"] == 0.1

    def test_preset_fills_unless_explicit(self):
        d = parse_config(minimal(distill={"preset": "cifar-like", "alpha": 0.5})).distill_config()
        assert (d.alpha, d.beta, d.gamma) == (0.5, 0.01, 1.0)

    def test_negative_tau_names_path(self):
        with pytest.raises(ConfigError) as info:
            parse_config(minimal(distill={"tau": -1}))
        assert info.value.path == "distill.tau" and "distill.tau" in str(info.value)

    @pytest.mark.parametrize("doc,path", [
        (minimal(run={"bogus": 1}), "run.bogus"),
        ({**minimal(), "extra": {}}, "extra"),
        (minimal(optim={"milestones": [5, 3]}), "optim.milestones"),
        (minimal(run={"mode": "multi"}), "run.mode"),
        (minimal(data={"source": "csv"}), "data.train_path"),
    ])
    def test_rejections_name_path(self, doc, path):
        with pytest.raises(ConfigError) as info:
            parse_config(doc)
        assert info.value.path == path

    def test_unknown_model_key(self):
        doc = minimal()
        doc["models"][0]["depth"] = 3
        with pytest.raises(ConfigError) as info:
            parse_config(doc)
        assert info.value.path.startswith("models.0")

    def test_model_needs_architecture(self):
        doc = minimal()
        del doc["models"][0]["preset"]
        with pytest.raises(ConfigError):
            parse_config(doc)

    def test_duplicate_names(self):
        doc = minimal()
        doc["models"][1]["name"] = "t"
        with pytest.raises(ConfigError):
            parse_config(doc)

    def test_roundtrip_fixed_point(self):
        first = parse_config(minimal(distill={"preset": "cifar-like"}))
        second = parse_config(json.loads(first.dumps()))
        assert second.dumps() == first.dumps()

    def test_load_missing_and_invalid(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "none.json")
        (tmp_path / "bad.json").write_text("{")
        with pytest.raises(ConfigError):
            load_config(tmp_path / "bad.json")


class TestDerived:
    def test_plan_and_specs(self):
        cfg = parse_config(minimal())
        plan = cfg.plan()
        assert plan.roles == ["teacher", "student"] and plan.epochs == 2
        specs = cfg.model_specs((1, 8, 8), 3)
        assert specs[0].stage_widths == [16, 32, 64] and specs[1].stage_widths == [8, 16, 32]
        assert cfg.model_seeds() == [0, 1]

    def test_label_noise_train_only(self):
        cfg = parse_config(minimal(data={"label_noise": {"fraction": 0.5, "seed": 0}, "test_per_class": 4}))
        train, test = cfg.datasets()
        clean_train, clean_test = parse_config(minimal(data={"test_per_class": 4})).datasets()
        assert (train.labels != clean_train.labels).sum() == len(train) // 2
        assert (test.labels == clean_test.labels).all()

    def test_csv_source(self, tmp_path):
        (tmp_path / "a.csv").write_text("0,0,0,0,0\n1,255,255,255,255\n")
        doc = minimal(data={"source": "csv", "train_path": "a.csv", "test_path": "a.csv"})
        for key in ("classes", "per_class", "shape"):
            doc["data"].pop(key)
        train, test = parse_config(doc, tmp_path).datasets()
        assert train.shape == (1, 2, 2) and len(test) == 2
