import numpy as np
import pytest

from dmpt import backbone as bb
from dmpt import prompts as pr
from dmpt import tensor as T
from dmpt.config import ExperimentConfig
from dmpt.errors import ConfigError, ContractError, DataError, DivergenceError
from dmpt.trainer import (
    LOG_COLUMNS,
    FewShotTask,
    Sample,
    Trainer,
    loss_ca,
    loss_total,
    sample_few_shot,
    warmup_loss,
)

NAMES = ["red_square", "green_circle", "blue_triangle", "yellow_cross"]


@pytest.fixture(scope="module")
def vocab():
    return bb.Vocabulary.default()


@pytest.fixture(scope="module")
def weights(vocab):
    return bb.init_weights(bb.BackboneConfig(vocab_size=len(vocab)), seed=0)


def toy_dataset(per_class=6, seed=0):
    rng = np.random.default_rng(seed)
    samples = []
    for label in range(len(NAMES)):
        for i in range(per_class):
            img = rng.uniform(-1, 1, (3, 32, 32)).astype(np.float32)
            samples.append(Sample(img, label, (0, 0, 8, 8), f"{label}/{i}"))
    return NAMES, samples


def make(weights, vocab, variant="dpt", seed=0, **cfg):
    config = ExperimentConfig(variant=variant, seed=seed, **cfg)
    prompts = pr.PromptSet.initialise(config.prompt_settings(), weights.config, len(NAMES), seed)
    return pr.PromptedCLIP(weights, vocab, NAMES, prompts), config


def log_softmax_ce(logits, labels):
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(labels)), labels].mean())


class TestFewShotSampling:
    def test_arity_and_disjointness(self):
        task = sample_few_shot(toy_dataset(), 4, seed=0)
        assert len(task.support) == 16 and len(task.query) == 8
        assert {s.path for s in task.support}.isdisjoint({s.path for s in task.query})
        assert task.shots == 4

    def test_sixteen_shots_four_classes(self):
        task = sample_few_shot(toy_dataset(per_class=20), 16, seed=1)
        assert len(task.support) == 64

    def test_seeded(self):
        data = toy_dataset()
        a, b = sample_few_shot(data, 2, 5), sample_few_shot(data, 2, 5)
        assert [s.path for s in a.support] == [s.path for s in b.support]
        others = [[s.path for s in sample_few_shot(data, 2, seed).support] for seed in (6, 7, 8)]
        assert all(o != [s.path for s in a.support] for o in others)

    def test_short_class_named(self):
        with pytest.raises(DataError, match="yellow_cross"):
            names, samples = toy_dataset(per_class=3)
            sample_few_shot((names, samples[:-1]), 3, 0)


class TestLosses:
    def test_main_phase_total(self, weights, vocab):
        model, config = make(weights, vocab)
        trainer = Trainer(model, config, epochs=1)
        x = np.stack([s.image for s in toy_dataset()[1][:8:2]])
        y = np.array([0, 0, 1, 1])
        plain = model.plain_features(x)
        total, report = trainer.compute_losses(x, y, plain, "main")
        result = model.forward(x, labels=y, plain_features=plain)
        l_ce = log_softmax_ce(result.logits.data, y)
        l_ca = log_softmax_ce(result.aux_logits[0].data, y)
        assert report.l_ce == pytest.approx(l_ce, abs=1e-5)
        assert report.l_ca == pytest.approx(l_ca, abs=1e-5)
        assert abs(report.total - (0.3 * report.l_ca + report.l_ce)) < 1e-6

    def test_warmup_total(self, weights, vocab):
        model, config = make(weights, vocab)
        trainer = Trainer(model, config, epochs=1)
        x = np.stack([s.image for s in toy_dataset()[1][::6]])
        y = np.arange(4)
        plain = model.plain_features(x)
        _, report = trainer.compute_losses(x, y, plain, "warmup")
        result = model.forward(x, labels=y, plain_features=plain)
        learned = model.learned_text_features().data
        l_coop = log_softmax_ce(plain.data @ learned.T / 0.01, y)
        l_vpt = log_softmax_ce(result.image_features.data @ model.handcrafted.data.T / 0.01, y)
        assert report.l_coop == pytest.approx(l_coop, abs=1e-4)
        assert report.l_vpt == pytest.approx(l_vpt, abs=1e-4)
        expected = report.l_coop + report.l_vpt + 0.1 * report.l_ce + 0.3 * report.l_ca
        assert abs(report.total - expected) < 1e-6

    def test_scalar_combinations(self):
        a, b, c, d = (T.Tensor(np.float32(v)) for v in (1.5, 0.25, 2.0, 4.0))
        assert loss_total(a, b, 0.3).item() == pytest.approx(1.5 + 0.3 * 0.25)
        assert warmup_loss(c, d, a, b, 0.3, 0.1).item() == pytest.approx(2.0 + 4.0 + 0.15 + 0.075)
        assert warmup_loss(c, d, a, None, 0.3, 0.1).item() == pytest.approx(6.15)

    def test_loss_ca_requires_generator(self, weights, vocab):
        model, _ = make(weights, vocab, "vlp")
        result = model.forward(np.zeros((1, 3, 32, 32), np.float32), labels=np.array([0]))
        with pytest.raises(ContractError):
            loss_ca(result, [0])

    def test_batch_mean_contract(self, weights, vocab):
        model, config = make(weights, vocab)
        trainer = Trainer(model, config, epochs=1)
        x = np.stack([s.image for s in toy_dataset()[1][:2]])
        y = np.array([0, 0])
        plain = model.plain_features(x)
        _, pair = trainer.compute_losses(x, y, plain, "main")
        singles = [trainer.compute_losses(x[i : i + 1], y[i : i + 1], plain[i : i + 1], "main")[1] for i in range(2)]
        assert pair.total == pytest.approx(np.mean([s.total for s in singles]), abs=1e-5)


class TestTrainer:
    def task(self):
        return sample_few_shot(toy_dataset(), 2, seed=0)

    def test_phase_boundary(self, weights, vocab):
        model, config = make(weights, vocab, epochs=3, warmup_epochs=2, batch_size=4)
        trainer = Trainer(model, config)
        trainer.fit(self.task())
        assert trainer.phase_switches == [(0, "warmup"), (2, "main")]
        assert [r.phase for r in trainer.history] == ["warmup"] * 4 + ["main"] * 2

    def test_no_knowledge_warmup_for_single_modality(self, weights, vocab):
        model, config = make(weights, vocab, "coop", epochs=2, warmup_epochs=2)
        trainer = Trainer(model, config)
        trainer.fit(self.task())
        assert trainer.phase_switches == [(0, "main")]

    def test_zero_shot_does_not_train(self, weights, vocab):
        model, config = make(weights, vocab, "zeroshot")
        assert Trainer(model, config).fit(self.task()) == []

    def test_deterministic(self, weights, vocab):
        runs = []
        for _ in range(2):
            model, config = make(weights, vocab, epochs=2, warmup_epochs=1, lr_visual=0.5, lr_text=0.5)
            hist = Trainer(model, config).fit(self.task())
            runs.append(([r.total for r in hist], model.prompts.named_parameters()))
        assert runs[0][0] == runs[1][0]
        for name, p in runs[0][1].items():
            np.testing.assert_array_equal(p.data, runs[1][1][name].data)

    def test_parameters_move_backbone_does_not(self, weights, vocab):
        model, config = make(weights, vocab, epochs=1, warmup_epochs=0, fixed_warmup_epochs=0, lr_visual=0.1)
        before = {k: p.data.copy() for k, p in model.prompts.named_parameters().items()}
        stamp = weights.fingerprint()
        Trainer(model, config).fit(self.task())
        assert weights.fingerprint() == stamp
        moved = [k for k, p in model.prompts.named_parameters().items() if not np.array_equal(p.data, before[k])]
        assert "context" in moved and "visual.1" in moved and "generator.shared.wq" in moved

    def test_group_schedules(self, weights, vocab):
        model, config = make(weights, vocab, epochs=20, warmup_epochs=0, lr_generator=3.0, lr_head=0.1)
        states = Trainer(model, config).make_states(steps_per_epoch=2)
        assert set(states) == {"text", "visual", "generator", "generator_attn", "head"}
        assert states["text"].warmup_steps == 0 and states["text"].learning_rate == 2e-3
        assert states["visual"].warmup_steps == 20 and states["visual"].learning_rate == 1e-5
        assert states["generator"].base_lr == states["generator_attn"].base_lr == 3.0
        assert states["head"].base_lr == 0.1

    def test_divergence(self, weights, vocab, monkeypatch):
        model, config = make(weights, vocab, epochs=1, warmup_epochs=0)
        trainer = Trainer(model, config)
        real = trainer.compute_losses

        def poisoned(*args):
            total, report = real(*args)
            report.total = float("nan")
            return total, report

        monkeypatch.setattr(trainer, "compute_losses", poisoned)
        with pytest.raises(DivergenceError) as err:
            trainer.fit(self.task())
        assert err.value.step == 0 and err.value.exit_code == 3

    def test_log_columns(self, weights, vocab, tmp_path):
        model, config = make(weights, vocab, epochs=2, warmup_epochs=1, batch_size=4)
        log = tmp_path / "train.log"
        Trainer(model, config, log_path=log).fit(self.task())
        lines = log.read_text().splitlines()
        assert lines[0].split("\t") == list(LOG_COLUMNS)
        rows = [l.split("\t") for l in lines[1:]]
        assert len(rows) == 4 and all(len(r) == len(LOG_COLUMNS) for r in rows)
        assert [r[2] for r in rows] == ["warmup", "warmup", "main", "main"]

    def test_empty_support(self, weights, vocab):
        model, config = make(weights, vocab)
        with pytest.raises(DataError):
            Trainer(model, config).fit(FewShotTask(NAMES, [], []))


class TestConfig:
    def test_text_round_trip(self):
        cfg = ExperimentConfig(variant="vlp", shots_list=(1, 4), vpt_layers=(1, 2), lr_head=0.5)
        assert ExperimentConfig.from_text(cfg.to_text()) == cfg

    def test_invalid_variant_lists_choices(self):
        with pytest.raises(ConfigError, match="coop"):
            ExperimentConfig(variant="cocoop")

    def test_constraints(self):
        with pytest.raises(ConfigError):
            ExperimentConfig(warmup_epochs=200)
        with pytest.raises(ConfigError):
            ExperimentConfig(alpha=-1)

    def test_unknown_key_and_bad_value(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_strings({"learning_rate": "1"})
        with pytest.raises(ConfigError):
            ExperimentConfig.from_strings({"epochs": "many"})

    def test_comments_and_overrides(self):
        cfg = ExperimentConfig.from_text("epochs = 5  # short\nwarmup_epochs = 0\n", {"seed": "3"})
        assert (cfg.epochs, cfg.warmup_epochs, cfg.seed) == (5, 0, 3)

    def test_one_shot_epochs(self):
        cfg = ExperimentConfig()
        assert cfg.epochs_for(1) == 60 and cfg.epochs_for(16) == 100
