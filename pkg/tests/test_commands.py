import contextlib
import io
import tempfile
import unittest
from pathlib import Path

from eda.commands import main
from eda.commands.error_handler import EXIT_DATA, EXIT_OK, EXIT_USAGE
from eda.data import load_anchors, load_checkpoint, load_scenes
from eda.data.records import load_layer_metrics, load_metrics, save_layer_metrics, save_metrics
from eda.metrics import LayerMetrics, MetricsRow
from eda.model import init_model
from eda.training import TrainConfig
from eda.utils.files import read_csv

GEN_CONFIG = "num_scenes = 40\nhorizon = 4\nseed = 1\n"
TRAIN_CONFIG = "# small decoder for tests\nnum_layers = 3\nevolve_layers = 1\nhidden_dim = 6\nbatch_size = 16\n"
MATRIX_CONFIG = "evolve_times = 1\ndistinct = true\nseeds = 0\nepochs = 1\nhidden_dim = 6\nnum_layers = 3\nk = 3\n"


class CommandTests(unittest.TestCase):
    """End-to-end runs of the command-line entry point in a temporary directory."""

    def setUp(self):
        self._directory = tempfile.TemporaryDirectory()
        self.directory = Path(self._directory.name)
        self.stdout = io.StringIO()

    def tearDown(self):
        self._directory.cleanup()

    def path(self, name: str) -> str:
        return str(self.directory / name)

    def write(self, name: str, text: str) -> str:
        path = self.directory / name
        path.write_text(text)
        return str(path)

    def run_command(self, *argv: str) -> int:
        with contextlib.redirect_stdout(self.stdout), contextlib.redirect_stderr(io.StringIO()):
            return main(list(argv))

    def prepare(self, anchors: int = 4) -> None:
        """Scenes and anchors shared by the later stages."""
        config = self.write("gen.cfg", GEN_CONFIG)
        self.assertEqual(self.run_command("gen-data", "--config", config, "--out", self.path("scenes.edar")), EXIT_OK)
        code = self.run_command(
            "make-anchors", "--data", self.path("scenes.edar"), "--k", str(anchors), "--out", self.path("anchors.edar")
        )
        self.assertEqual(code, EXIT_OK)

    def test_gen_data_is_deterministic(self):
        config = self.write("gen.cfg", GEN_CONFIG)
        self.assertEqual(self.run_command("gen-data", "--config", config, "--out", self.path("a.edar")), EXIT_OK)
        self.assertEqual(self.run_command("gen-data", "--config", config, "--out", self.path("b.edar")), EXIT_OK)

        self.assertEqual((self.directory / "a.edar").read_bytes(), (self.directory / "b.edar").read_bytes())
        self.assertEqual(len(load_scenes(self.path("a.edar"))), 40)
        self.assertIn("straight-fast", self.stdout.getvalue())

    def test_unknown_config_key(self):
        config = self.write("gen.cfg", "num_scenes = 5\nlanes = 3\n")
        self.assertEqual(self.run_command("gen-data", "--config", config, "--out", self.path("a.edar")), EXIT_USAGE)
        self.assertFalse((self.directory / "a.edar").exists())

    def test_single_anchor(self):
        self.prepare(anchors=1)
        anchor_sets = load_anchors(self.path("anchors.edar"))
        self.assertEqual([len(anchor_set) for anchor_set in anchor_sets.values()], [1])

    def test_train_without_epochs_writes_initial_model(self):
        self.prepare()
        config = self.write("train.cfg", TRAIN_CONFIG)
        code = self.run_command(
            "train",
            "--data", self.path("scenes.edar"),
            "--anchors", self.path("anchors.edar"),
            "--config", config,
            "--epochs", "0",
            "--seed", "3",
            "--out", self.path("model.edar"),
        )
        self.assertEqual(code, EXIT_OK)

        checkpoint = load_checkpoint(self.path("model.edar"))
        cfg = TrainConfig(num_layers=3, evolve_layers=(1,), hidden_dim=6, batch_size=16, epochs=0, seed=3)
        scenes = load_scenes(self.path("scenes.edar"))
        model_cfg = cfg.model_config_for(scenes[0].context.shape[0], 4, 0.5, 4)
        expected = init_model(model_cfg, load_anchors(self.path("anchors.edar")))
        self.assertEqual(checkpoint.params, expected)
        self.assertEqual(checkpoint.metadata["evolve_layers"], "1")
        self.assertEqual(read_csv(self.path("train_log.csv")), [])

    def test_train_and_evaluate(self):
        self.prepare()
        config = self.write("train.cfg", TRAIN_CONFIG)
        code = self.run_command(
            "train",
            "--data", self.path("scenes.edar"),
            "--anchors", self.path("anchors.edar"),
            "--config", config,
            "--epochs", "2",
            "--out", self.path("model.edar"),
        )
        self.assertEqual(code, EXIT_OK)
        self.assertEqual([row["epoch"] for row in read_csv(self.path("train_log.csv"))], ["1", "2"])

        code = self.run_command(
            "eval",
            "--data", self.path("scenes.edar"),
            "--model", self.path("model.edar"),
            "--k", "3",
            "--score-mode", "rank",
            "--out", self.path("metrics.csv"),
        )
        self.assertEqual(code, EXIT_OK)

        [row] = load_metrics(self.path("metrics.csv"))
        self.assertEqual(row.config_id, "eda-evolve1-on-bce")
        self.assertEqual(row.score_mode, "rank")
        self.assertTrue(row.distinct)
        layers = load_layer_metrics(self.path("layers.csv"))
        self.assertEqual([layer.layer for layer in layers[row.config_id]], [1, 2, 3])

    def test_train_log_has_per_layer_columns(self):
        self.prepare()
        config = self.write("train.cfg", TRAIN_CONFIG)
        code = self.run_command(
            "train",
            "--data", self.path("scenes.edar"),
            "--anchors", self.path("anchors.edar"),
            "--config", config,
            "--evolve-layers", "2",
            "--epochs", "1",
            "--out", self.path("model.edar"),
        )
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(load_checkpoint(self.path("model.edar")).metadata["evolve_layers"], "2")

        [row] = read_csv(self.path("train_log.csv"))
        layer_columns = ["reg_l1", "cls_l1", "reg_l2", "cls_l2", "reg_l3", "cls_l3"]
        self.assertEqual(list(row), ["epoch", "total", "reg", "cls", "lr", *layer_columns])
        self.assertAlmostEqual(sum(float(row[f"reg_l{layer}"]) for layer in (1, 2, 3)), float(row["reg"]), places=6)

    def test_evolve_layers_flag_is_checked(self):
        self.prepare()
        config = self.write("train.cfg", TRAIN_CONFIG)
        for flag in ("abc", "3", "2,1"):
            with self.subTest(flag=flag):
                code = self.run_command(
                    "train",
                    "--data", self.path("scenes.edar"),
                    "--anchors", self.path("anchors.edar"),
                    "--config", config,
                    "--evolve-layers", flag,
                    "--out", self.path("model.edar"),
                )
                self.assertEqual(code, EXIT_USAGE)
        self.assertFalse((self.directory / "model.edar").exists())

    def test_eval_length_measure(self):
        self.prepare()
        config = self.write("train.cfg", TRAIN_CONFIG + "length_measure = displacement\n")
        train_args = ("--anchors", self.path("anchors.edar"), "--config", config, "--epochs", "1")
        code = self.run_command("train", "--data", self.path("scenes.edar"), *train_args, "--out", self.path("m.edar"))
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(load_checkpoint(self.path("m.edar")).metadata["length_measure"], "displacement")

        for measure in ("arc", "displacement"):
            with self.subTest(measure=measure):
                code = self.run_command(
                    "eval",
                    "--data", self.path("scenes.edar"),
                    "--model", self.path("m.edar"),
                    "--k", "3",
                    "--length-measure", measure,
                    "--out", self.path(f"metrics-{measure}.csv"),
                )
                self.assertEqual(code, EXIT_OK)
                self.assertEqual(len(load_metrics(self.path(f"metrics-{measure}.csv"))), 1)
        self.assertEqual(self.run_command("eval", "--length-measure", "chord"), EXIT_USAGE)

    def test_eval_rejects_non_finite_scenes(self):
        self.prepare()
        config = self.write("train.cfg", TRAIN_CONFIG)
        train_args = ("--anchors", self.path("anchors.edar"), "--config", config, "--epochs", "0")
        self.run_command("train", "--data", self.path("scenes.edar"), *train_args, "--out", self.path("m.edar"))

        scenes = self.directory / "scenes.edar"
        lines = scenes.read_text().splitlines()
        fields = lines[-1].split(" ")
        fields[-1] = "nan"
        scenes.write_text("\n".join([*lines[:-1], " ".join(fields)]) + "\n")

        code = self.run_command(
            "eval", "--data", str(scenes), "--model", self.path("m.edar"), "--k", "3", "--out", self.path("metrics.csv")
        )
        self.assertEqual(code, EXIT_DATA)

    def test_incompatible_flags(self):
        self.prepare()
        code = self.run_command(
            "train",
            "--data", self.path("scenes.edar"),
            "--anchors", self.path("anchors.edar"),
            "--paradigm", "anchor",
            "--distinct", "on",
            "--out", self.path("model.edar"),
        )
        self.assertEqual(code, EXIT_USAGE)

    def test_report_has_one_series_per_row(self):
        layers = [LayerMetrics(layer, 1.0 / layer, 2.0 / layer, 0.5 / layer) for layer in (1, 2, 3)]
        rows = [
            MetricsRow("evolve0-distinct-bce", 0, True, "bce", "rank", 1.0, 2.0, 0.3, 0.4, 1.5),
            MetricsRow("evolve2-distinct-bce", 2, True, "bce", "rank", 0.9, 1.8, 0.2, 0.5, 1.7),
        ]
        save_metrics(self.path("metrics.csv"), rows)
        save_layer_metrics(self.path("layers.csv"), {row.config_id: layers for row in rows})

        out = self.directory / "plots"
        self.assertEqual(self.run_command("report", "--in", self.path("metrics.csv"), "--out", str(out)), EXIT_OK)
        self.assertEqual(sorted(load_layer_metrics(out / "layers.csv")), [row.config_id for row in rows])
        self.assertTrue((out / "min_fde_by_layer.svg").is_file())
        self.assertTrue((out / "miss_rate_by_layer.svg").is_file())

        first = (out / "min_fde_by_layer.svg").read_bytes()
        self.run_command("report", "--in", self.path("metrics.csv"), "--out", str(out))
        self.assertEqual((out / "min_fde_by_layer.svg").read_bytes(), first)

    def test_report_without_layer_rows(self):
        save_metrics(self.path("metrics.csv"), [MetricsRow("x", 0, True, "bce", "rank", 1.0, 2.0, 0.3, 0.4, 1.5)])
        save_layer_metrics(self.path("layers.csv"), {})
        code = self.run_command("report", "--in", self.path("metrics.csv"), "--out", self.path("plots"))
        self.assertEqual(code, EXIT_DATA)

    def test_single_cell_ablation(self):
        """With one cell and one seed the median row is that run's row."""
        self.prepare()
        matrix = self.write("matrix.cfg", MATRIX_CONFIG)
        code = self.run_command(
            "ablate",
            "--matrix", matrix,
            "--data", self.path("scenes.edar"),
            "--anchors", self.path("anchors.edar"),
            "--out", str(self.directory),
        )
        self.assertEqual(code, EXIT_OK)

        [summary] = load_metrics(self.path("metrics.csv"))
        [run] = read_csv(self.path("runs.csv"))
        self.assertEqual(summary.config_id, "evolve1-distinct-bce")
        self.assertEqual(run["config_id"], summary.config_id)
        self.assertEqual(float(run["min_fde"]), summary.min_fde)
        self.assertEqual(float(run["map_rank"]), summary.map)

    def test_exit_codes(self):
        """Usage problems exit with 1, unreadable data with 2."""
        self.assertEqual(self.run_command("no-such-command"), EXIT_USAGE)
        self.assertEqual(self.run_command("make-anchors", "--k", "many"), EXIT_USAGE)
        self.assertEqual(self.run_command("make-anchors", "--data", self.path("absent.edar")), EXIT_DATA)

        self.write("scenes.edar", "format=edar-scenes version=9 schema=a count=0\n")
        self.assertEqual(self.run_command("make-anchors", "--data", self.path("scenes.edar")), EXIT_DATA)


if __name__ == "__main__":
    unittest.main()
