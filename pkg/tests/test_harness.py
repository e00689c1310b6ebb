import json
import math

import numpy as np
import pytest

from aggdetr import cli
from aggdetr.ablation import ROWS, row_config, run_ablation, write_ablation
from aggdetr.attention import attention_maps, box_token_mask, dump_attention
from aggdetr.backbone import DomainLabel
from aggdetr.config import TOGGLES, TrainConfig
from aggdetr.data import SceneSpec, generate_benchmark, read_pgm
from aggdetr.errors import ConfigError, ContractError
from aggdetr.evaluate import Detection, class_ap, evaluate_map, mean_average_precision
from aggdetr.model import Batch, DetrGA
from aggdetr.train import BatchSampler, load_checkpoint, run_step, save_checkpoint, train
from oracles import voc_ap_hand

TINY_SPEC = SceneSpec(image_size=32, size_range=(9.0, 14.0), seed=1)
TINY = TrainConfig(d=16, heads=2, ffn_hidden=32, enc_depth=1, dec_depth=1, num_queries=5,
                   batch_per_domain=2, step1_batch=4, step1_iters=4, step2_iters=4)
COUNTS = {"source/train": 12, "source/test": 4, "target/train": 12, "target/test": 5}


@pytest.fixture(scope="module")
def bench():
    return generate_benchmark(TINY_SPEC, COUNTS)


@pytest.fixture(scope="module")
def trained(bench):
    return train(TINY, samples=bench)


class TestConfig:
    def test_loss_weight_defaults(self):
        c = TrainConfig()
        assert (c.lambda_cq, c.lambda_fq, c.lambda_bc, c.lambda_dc) == (10.0, 10.0, 1.0, 0.5)
        assert c.weight_decay == 1e-4

    def test_json_round_trip(self, tmp_path):
        c = TINY.replace(lr=3e-4, fq_position_embedding=True)
        c.save(tmp_path / "c.json")
        assert TrainConfig.load(tmp_path / "c.json") == c

    @pytest.mark.parametrize("bad", [dict(fq=False, fq_position_embedding=True), dict(fq=False, fq_weight_sharing=False),
                                     dict(d=18), dict(encoder_avgpool=True), dict(precision="float16")])
    def test_inconsistent_rejected(self, bad):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)

    def test_unknown_field_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"learning_rate": 1.0})


class TestTraining:
    def test_step2_batches_balance_domains(self, bench):
        model = DetrGA(TINY)
        seen = []
        original = model.losses

        def spy(batch, step=2):
            seen.append(np.bincount(batch.domains, minlength=2).tolist())
            return original(batch, step)

        model.losses = spy
        run_step(model, 2, bench["source"], bench["target"], 5)
        assert seen == [[2, 2]] * 5

    def test_source_only_step_uses_source_only(self, bench):
        model = DetrGA(row_config(TINY, "a"))
        recs = run_step(model, 2, bench["source"], bench["target"], 2)
        assert all(r["l_cq"] == 0 and r["l_fq"] == 0 and r["l_bc"] == 0 for r in recs)

    def test_loss_decreases_over_50_iterations(self, bench):
        model = DetrGA(TINY.replace(seed=0))
        recs = run_step(model, 1, bench["source"], None, 50)
        # regression bound pinned from the seed-0 run
        assert recs[-1]["total"] < recs[0]["total"]

    def test_records_carry_every_component(self, trained):
        rec = trained.loss_log[-1]
        for k in ("step", "iter", "l_det", "l_cq", "l_fq", "l_bc", "l_dc", "total", "lambda_cq", "lr", "grad_norm"):
            assert k in rec
        assert [r["step"] for r in trained.loss_log] == [1] * 4 + [2] * 4

    def test_deterministic(self, bench):
        a, b = train(TINY, samples=bench), train(TINY, samples=bench)
        assert a.loss_log == b.loss_log
        assert evaluate_map(a.model, bench["target_test"]).to_dict() == evaluate_map(b.model, bench["target_test"]).to_dict()

    def test_target_rows_never_reach_the_box_head(self, bench):
        model = DetrGA(TINY)
        batch = Batch.from_samples(bench["target"][:3])
        rep = model.losses(batch, 2)
        assert rep.l_det == 0
        model.zero_grad()
        rep.tensor.backward()
        for p in model.decoder.box_head.parameters() + model.decoder.class_head.parameters():
            assert p.grad is None or np.all(p.grad == 0)
        assert np.any(model.encoder.class_queries.grad != 0)

    def test_target_sample_with_boxes_rejected(self, bench):
        s = bench["target"][0]
        bad = type(s)(s.image, DomainLabel.TARGET, s.tags, s.hidden_labels, s.hidden_boxes)
        with pytest.raises(ContractError):
            Batch.from_samples([bad])

    def test_sampler_covers_epoch(self):
        s = BatchSampler(7, np.random.default_rng(0))
        assert sorted(s.take(7).tolist()) == list(range(7))

    def test_lr_drop(self, bench):
        recs = run_step(DetrGA(TINY), 1, bench["source"], None, 10)
        assert [r["lr"] for r in recs] == [TINY.lr] * 8 + [TINY.lr * 0.1] * 2


class TestAveragePrecision:
    box = np.array([0.5, 0.5, 0.4, 0.4])

    def test_single_hit(self):
        assert class_ap([Detection(0, 0, 0.9, self.box)], {0: self.box[None]}) == 1.0

    def test_all_misses(self):
        far = np.array([0.1, 0.1, 0.1, 0.1])
        assert class_ap([Detection(0, 0, 0.9, far), Detection(0, 0, 0.5, far)], {0: self.box[None]}) == 0.0

    def test_hand_built_ranking(self):
        other = np.array([0.2, 0.2, 0.2, 0.2])
        far = np.array([0.85, 0.15, 0.1, 0.1])
        gt = {0: self.box[None], 1: other[None]}
        dets = [Detection(0, 0, 0.9, self.box), Detection(1, 0, 0.8, far), Detection(1, 0, 0.7, other)]
        # ranked: TP, FP, TP over 2 GT -> recall .5 @ p 1, recall 1 @ p 2/3
        assert class_ap(dets, gt) == pytest.approx(voc_ap_hand([1, 0, 1], 2))
        assert class_ap(dets, gt) == pytest.approx(0.5 * 1 + 0.5 * 2 / 3)

    def test_duplicate_is_false_positive(self):
        dets = [Detection(0, 0, 0.9, self.box), Detection(0, 0, 0.8, self.box)]
        assert class_ap(dets, {0: self.box[None], 1: self.box[None]}) == pytest.approx(voc_ap_hand([1, 0], 2))

    @pytest.mark.parametrize("seed", range(20))
    def test_random_rankings_match_hand_integral(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 8))
        flags = rng.integers(0, 2, size=n).tolist()
        n_gt = sum(flags) + int(rng.integers(0, 3)) or 1
        # GT i lives in image i; a TP detection sits on its own GT, an FP lands in an empty image
        gt = {i: self.box[None] for i in range(n_gt)}
        dets, k = [], 0
        for r, f in enumerate(flags):
            img = k if f else 100 + r
            k += f
            dets.append(Detection(img, 0, 1.0 - r * 0.01, self.box))
        assert class_ap(dets, gt) == pytest.approx(voc_ap_hand(flags, n_gt))

    def test_missing_class_excluded_from_mean(self):
        per, m = mean_average_precision([Detection(0, 0, 0.9, self.box)], [(np.array([0]), self.box[None])], 3)
        assert per[0] == 1.0 and math.isnan(per[1]) and m == 1.0

    def test_empty_split(self, trained):
        with pytest.raises(ContractError):
            evaluate_map(trained.model, [])

    def test_evaluation_is_pure(self, trained, bench):
        before = {k: v.copy() for k, v in trained.model.state_dict().items()}
        a = evaluate_map(trained.model, bench["target_test"])
        b = evaluate_map(trained.model, bench["target_test"])
        assert a.to_dict() == b.to_dict() and a.sample_count == 5
        after = trained.model.state_dict()
        assert all(np.array_equal(before[k], after[k]) for k in before)

    def test_mean_is_mean_of_classes(self, trained, bench):
        ev = evaluate_map(trained.model, bench["source_test"])
        vals = [a for a in ev.per_class_ap if not math.isnan(a)]
        assert ev.mean_ap == pytest.approx(np.mean(vals))


def test_class_queries_do_not_change_detections(trained, bench):
    imgs = np.stack([s.image for s in bench["target_test"]])
    with_q = trained.model.forward(imgs, with_class_queries=True).prediction
    without = trained.model.forward(imgs, with_class_queries=False).prediction
    assert np.array_equal(with_q.boxes.data, without.boxes.data)
    assert np.array_equal(with_q.class_logits.data, without.class_logits.data)


def test_checkpoint_round_trip(trained, bench, tmp_path):
    path = save_checkpoint(trained.model, tmp_path / "m.npz")
    loaded = load_checkpoint(path)
    assert loaded.config == trained.model.config
    assert evaluate_map(loaded, bench["target_test"]).to_dict() == evaluate_map(trained.model, bench["target_test"]).to_dict()
    with pytest.raises(ContractError):
        load_checkpoint(tmp_path / "nope.npz")


class TestAttention:
    def test_rows_sum_to_one_and_fit_grid(self, trained, bench, tmp_path):
        s = bench["target_test"][0]
        for which, idx in (("class_query", 2), ("foreground", 0), ("object", 4)):
            amap = dump_attention(trained.model, s, which, idx, -1, tmp_path / f"{which}.pgm")
            assert amap.grid == (4, 4) and amap.row.shape == (16,)
            assert amap.row.sum() == pytest.approx(1.0, abs=1e-6)
            assert read_pgm(tmp_path / f"{which}.pgm").shape == (4, 4)
            assert len(json.loads((tmp_path / f"{which}.json").read_text())["row"]) == 16

    def test_absent_queries_rejected(self, bench):
        model = DetrGA(row_config(TINY, "a"))
        with pytest.raises(ContractError):
            attention_maps(model, bench["target_test"][0].image, "class_query", 0)
        with pytest.raises(ContractError):
            attention_maps(model, bench["target_test"][0].image, "foreground", 0)

    def test_out_of_range_rejected(self, trained, bench):
        img = bench["target_test"][0].image
        with pytest.raises(ContractError):
            attention_maps(trained.model, img, "class_query", 5)
        with pytest.raises(ContractError):
            attention_maps(trained.model, img, "object", 0, block=3)

    def test_box_mask(self):
        m = box_token_mask(np.array([[0.25, 0.25, 0.5, 0.5]]), (4, 4)).reshape(4, 4)
        assert m[:2, :2].all() and m.sum() == 4


class TestAblation:
    def test_rows_differ_only_in_toggles(self):
        configs = {r: row_config(TINY, r, seed=3) for r in ROWS}
        for c in configs.values():
            d = {k: v for k, v in c.to_dict().items() if k not in TOGGLES}
            assert d == {**{k: v for k, v in TINY.to_dict().items() if k not in TOGGLES}, "seed": 3}
        assert not any(configs["a"].toggles()[k] for k in ("baseline", "cq", "fq", "encoder_avgpool"))
        assert configs["h"].baseline and configs["h"].cq and configs["h"].fq

    def test_unknown_row(self):
        with pytest.raises(ContractError):
            row_config(TINY, "z")

    def test_table_with_deltas(self, bench, tmp_path):
        res = run_ablation(TINY, bench, ["a", "c"], [0], out_dir=tmp_path)
        a, c = res.get("a", 0), res.get("c", 0)
        assert a.delta == 0 and c.delta == pytest.approx(c.target_map - a.target_map)
        write_ablation(res, tmp_path)
        assert (tmp_path / "ablation.tsv").read_text().count("\n") == 3


@pytest.fixture(scope="module")
def root(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    args = ["dataset", "build", "--root", str(root / "ds"), "--image-size", "32", "--source-train", "8",
            "--source-test", "3", "--target-train", "8", "--target-test", "3"]
    assert cli.main(args) == 0
    return root


class TestCli:
    FLAGS = ["--d", "16", "--heads", "2", "--ffn-hidden", "32", "--enc-depth", "1", "--dec-depth", "1",
             "--num-queries", "5", "--step1-iters", "2", "--step2-iters", "2", "--batch-per-domain", "2"]

    def test_train_eval_dump(self, root, capsys):
        out = root / "run"
        assert cli.main(["train", "--dataset", str(root / "ds"), "--out", str(out), *self.FLAGS]) == 0
        for name in ("checkpoint.npz", "loss_log.jsonl", "config.json", "loss_curves.png", "eval.json"):
            assert (out / name).exists(), name
        assert len((out / "loss_log.jsonl").read_text().splitlines()) == 4
        assert TrainConfig.load(out / "config.json").d == 16
        ck = str(out / "checkpoint.npz")
        assert cli.main(["eval", "--checkpoint", ck, "--dataset", str(root / "ds")]) == 0
        assert "mean\t" in capsys.readouterr().out
        assert cli.main(["attn-dump", "--checkpoint", ck, "--dataset", str(root / "ds"), "--which", "foreground",
                         "--out", str(root / "fg.pgm"), "--overlay"]) == 0
        assert (root / "fg.pgm").exists() and (root / "fg.png").exists()

    def test_config_file_then_flags(self, root, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"d": 16, "heads": 2, "lr": 0.5}))
        args = cli.build_parser().parse_args(["train", "--config", str(tmp_path / "c.json"), "--lr", "0.25", "--no-cq"])
        c = cli.config_from_args(args)
        assert (c.d, c.lr, c.cq, c.fq) == (16, 0.25, False, True)

    def test_output_root_env(self, root, monkeypatch, tmp_path):
        monkeypatch.setenv("AGGDETR_OUTPUT_ROOT", str(tmp_path))
        assert cli.main(["dataset", "build", "--image-size", "32", "--source-train", "1", "--source-test", "1",
                         "--target-train", "1", "--target-test", "1"]) == 0
        assert (tmp_path / "dataset" / "manifest.json").exists()

    def test_contract_errors_exit_1(self, root, tmp_path):
        assert cli.main(["eval", "--checkpoint", str(tmp_path / "missing.npz")]) == 1
        assert cli.main(["grad-check", "--cases", "not_a_case"]) == 1
        assert cli.main(["train", "--dataset", str(tmp_path / "empty"), *self.FLAGS]) == 1
        (tmp_path / "bad.json").write_text("{")
        assert cli.main(["train", "--dataset", str(root / "ds"), "--config", str(tmp_path / "bad.json")]) == 1
        assert cli.main(["train", "--dataset", str(root / "ds"), "--d", "18"]) == 1
        ck = root / "a.npz"
        save_checkpoint(DetrGA(row_config(TINY, "a")), ck)
        assert cli.main(["attn-dump", "--checkpoint", str(ck), "--dataset", str(root / "ds"), "--which", "class_query"]) == 1

    def test_non_finite_loss_exits_2(self, root, monkeypatch, capsys):
        original = DetrGA.losses

        def poisoned(self, batch, step=2):
            rep = original(self, batch, step)
            rep.l_det = float("nan")
            return rep

        monkeypatch.setattr(DetrGA, "losses", poisoned)
        assert cli.main(["train", "--dataset", str(root / "ds"), "--out", str(root / "nan"), *self.FLAGS]) == 2
        assert "l_det" in capsys.readouterr().err

    def test_grad_check_subset(self, capsys):
        assert cli.main(["grad-check", "--cases", "softmax_log_softmax,giou", "--instances", "3"]) == 0
        assert "giou" in capsys.readouterr().out

    def test_ablate(self, root):
        out = root / "abl"
        assert cli.main(["ablate", "--dataset", str(root / "ds"), "--out", str(out), "--rows", "a,d", "--seeds", "0",
                         *self.FLAGS]) == 0
        for name in ("ablation.tsv", "ablation.json", "ablation.png", "base_config.json"):
            assert (out / name).exists(), name
