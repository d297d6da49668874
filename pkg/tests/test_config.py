import pytest

from gsgcn.config import PRESETS, load_run_config


def test_resolved_echo_reproduces_the_run(tmp_path):
    rc = load_run_config(None, {"train.max_epochs": "7", "model.num_classes": "6", "run.seed": "3",
                                "data.class_names": "a, b, c, d, e, f"}, "small")
    echo = tmp_path / "resolved.ini"
    echo.write_text(rc.to_ini())
    again = load_run_config(echo)
    assert again.model == rc.model and again.train == rc.train and again.seed == 3
    assert again.names() == list("abcdef")


def test_precedence_preset_file_override(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[run]\npreset = micro\n[train]\nbatch_size = 4\nlr_milestones = 3, 5\n")
    rc = load_run_config(p, {"train.batch_size": "2"})
    assert rc.model == PRESETS["micro"] and rc.train.batch_size == 2 and rc.train.lr_milestones == (3, 5)
    assert load_run_config(p, preset="small").model == PRESETS["small"]


@pytest.mark.parametrize("overrides", [{"model.bogus": "1"}, {"nodot": "1"}, {"run.colour": "x"},
                                       {"model.distance_embedding": "maybe"}, {"model.num_frames": "30"},
                                       {"data.references": "some"}])
def test_bad_settings_raise(overrides):
    with pytest.raises(ValueError):
        load_run_config(None, overrides)


def test_missing_file():
    with pytest.raises(FileNotFoundError):
        load_run_config("/nonexistent/x.ini")
