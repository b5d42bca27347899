#!/usr/bin/env python3
"""End-to-end smoke test for the earlyrec_py extension module.

Build the module first (either profile works):

    cargo build -p earlyrec-py

then run this script from the repository root:

    python3 python/smoke_test.py
"""

import importlib.util
import json
import math
import os
import shutil
import sys
import tempfile


def locate_library():
    root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    candidates = [
        os.path.join(root, "target", profile, name)
        for profile in ("debug", "release")
        for name in ("libearlyrec_py.so", "earlyrec_py.so", "libearlyrec_py.dylib")
    ]
    for path in candidates:
        if os.path.exists(path):
            return path
    sys.exit("earlyrec_py library not found; run `cargo build -p earlyrec-py` first")


def import_module(lib_path, work_dir):
    # CPython insists on the bare module name, so link/copy the cdylib.
    target = os.path.join(work_dir, "earlyrec_py.so")
    try:
        os.symlink(lib_path, target)
    except OSError:
        shutil.copyfile(lib_path, target)
    spec = importlib.util.spec_from_file_location("earlyrec_py", target)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def main():
    with tempfile.TemporaryDirectory() as work:
        m = import_module(locate_library(), work)

        # A desk-scale generator: 3 classes, short sequences.
        spec = json.loads(m.default_generator_spec())
        spec.update(
            num_classes=3,
            feature_dim=6,
            phases_per_class=2,
            shared_prefix_len_range=[2, 3],
            phase_len_range=[4, 8],
            length_jitter=[
                {"mean": 18.0, "std": 2.0},
                {"mean": 20.0, "std": 2.0},
                {"mean": 22.0, "std": 2.0},
            ],
            seed=11,
        )
        dataset = m.generate(json.dumps(spec), [5, 5, 5])
        assert len(dataset) == 15, len(dataset)
        assert dataset.num_classes() == 3
        assert dataset.feature_dim() == 6
        assert dataset.split_len("train") + dataset.split_len("val") + dataset.split_len("test") == 15
        assert dataset.min_len("test") >= 1

        # Dataset round trip is byte-stable.
        path_a = os.path.join(work, "a.ndjson")
        path_b = os.path.join(work, "b.ndjson")
        dataset.save(path_a)
        m.Dataset.load(path_a).save(path_b)
        with open(path_a, "rb") as fa, open(path_b, "rb") as fb:
            assert fa.read() == fb.read(), "dataset round trip changed bytes"

        # Encoder fine-tuning and feature extraction.
        enc_cfg = json.loads(m.encoder_defaults(11))
        enc_cfg.update(learning_rate=1e-3, epochs=2, embedding_dim=6,
                       sample={"segment_len": 5, "per_segment": 2})
        encoder = m.Encoder.finetune(dataset, "weighted_subvideo", json.dumps(enc_cfg))
        assert encoder.embedding_dim == 6
        feats = encoder.embed_sequence(dataset, 0)
        assert len(feats) >= 10 and len(feats[0]) == 6

        # Teacher, then a future-state-predicting student against it.
        teacher_cfg = json.loads(m.teacher_defaults(11))
        teacher_cfg.update(epochs=3, patience=3)
        teacher = m.Model.train_teacher(dataset, encoder, 8, json.dumps(teacher_cfg))
        assert not teacher.is_student
        assert teacher.hidden_dim == 8

        student_cfg = json.loads(m.fsp_defaults(11))
        student_cfg.update(epochs=2, patience=2)
        student = m.Model.train_fsp(dataset, encoder, teacher, json.dumps(student_cfg))
        assert student.is_student

        # Model checkpoints round trip.
        teacher_path = os.path.join(work, "teacher.json")
        teacher.save(teacher_path)
        reloaded = m.Model.load(teacher_path)
        assert reloaded.hidden_dim == 8 and not reloaded.is_student

        # Per-step probabilities are a distribution at every step.
        probs = student.predict_sequence(encoder, dataset, 0)
        assert len(probs) == len(feats)
        for row in probs:
            assert len(row) == 3
            assert math.isclose(sum(row), 1.0, rel_tol=1e-9)

        # Evaluation report: curve aligned with checkpoints, sane values.
        report = json.loads(m.evaluate(teacher, encoder, dataset))
        assert list(report) >= ["checkpoints", "accuracy"]
        assert len(report["accuracy"]) == len(report["checkpoints"])
        assert all(0.0 <= a <= 1.0 for a in report["accuracy"])
        assert len(report["confusion"]) == len(report["checkpoints"])
        assert report["full_video"]["time_aligned"] is False
        grid = m.default_checkpoints(dataset.min_len("test"))
        assert report["checkpoints"] == grid

        # Explicit checkpoint grids work too.
        small = json.loads(m.evaluate(teacher, encoder, dataset, [1, 2, 3]))
        assert small["checkpoints"] == [1, 2, 3]

        # Published constants behave.
        assert [m.early_weight(t, 8) for t in range(1, 9)] == [
            1.0, 0.5, 0.5, 0.25, 0.25, 0.125, 0.125, 0.125,
        ]
        assert m.false_positive_weight(10, 10) == 1.0
        assert m.false_positive_weight(1, 4) == 0.25

        # Analytic gradients agree with finite differences.
        worst = m.gradcheck_bptt(3, 0)
        assert worst < 1e-4, worst

        # Error paths surface as ValueError with a message.
        try:
            m.Model.train_fsp(dataset, encoder, student, json.dumps(student_cfg))
        except ValueError as e:
            assert "teacher" in str(e)
        else:
            sys.exit("expected ValueError for a student posing as teacher")

        try:
            m.evaluate(teacher, encoder, dataset, [0, 5])
        except ValueError as e:
            assert "checkpoint" in str(e)
        else:
            sys.exit("expected ValueError for checkpoint 0")

    print("smoke test passed")


if __name__ == "__main__":
    main()
