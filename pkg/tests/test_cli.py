"""Command-line pipeline on a small synthetic corpus"""

import json

import pytest
import yaml

import dialogue_retrieval
from src.core.workdir import MANIFEST_NAME

SMALL_CONFIG = {
    'seed': 0,
    'corpus': {'mc_size': 8, 'sc_size': 8, 'min_freq': 1, 'toy_groups': 60},
    'model': {'mode': 'qs', 'd_e': 8, 'd': 8, 'd_h': 8, 'max_len': 193},
    'train': {
        'batch_size': 4, 'epochs': 1, 'steps_per_epoch': 3, 'lr': 0.01, 'warmup': 0,
        'teacher_batch_size': 4, 'teacher_epochs': 1,
    },
    'index': {'n_lists': 3, 'nprobe': 2},
    'eval': {'ks': [1, 5], 'top_k': 5, 'sweep_sizes': [2, 5], 'bench_repeats': 1, 'bench_warmup': 0},
}


def write_config(directory, **extra):
    config = json.loads(json.dumps(SMALL_CONFIG))
    config['paths'] = {'workdir': str(directory / "work")}
    for key, value in extra.items():
        config[key] = value
    path = directory / "config.yaml"
    path.write_text(yaml.safe_dump(config), encoding='utf-8')
    return path


def run(config_path, *args):
    return dialogue_retrieval.main([args[0], '--config', str(config_path), *args[1:]])


PIPELINE = [
    ('generate-corpus',),
    ('build-dataset',),
    ('train-student',),
    ('train-teacher', '--teacher', 'qs'),
    ('train-teacher', '--teacher', 'qr'),
    ('distill',),
    ('build-index', '--kind', 'sparse', '--field', 'session'),
    ('build-index', '--kind', 'dense', '--field', 'session'),
    ('build-index', '--kind', 'ivf', '--field', 'session'),
    ('retrieve',),
    ('retrieve', '--backend', 'sparse'),
    ('evaluate',),
    ('evaluate', '--backend', 'sparse'),
    ('sweep-db',),
    ('bench',),
]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    config = write_config(root)
    codes = [(step[0], run(config, *step)) for step in PIPELINE]
    return root, config, codes


class TestPipeline:

    def test_every_command_succeeds(self, workspace):
        _, _, codes = workspace
        assert [code for _, code in codes] == [0] * len(PIPELINE), codes

    def test_artifacts_written(self, workspace):
        root, _, _ = workspace
        work = root / "work"
        for name in ("corpus.jsonl", "mc.jsonl", "sc.jsonl", "database.jsonl", "train_groups.jsonl", "vocab.txt",
                     "student_qs.ckpt", "student_qs_distilled.ckpt", "teacher_qs.ckpt", "teacher_qr.ckpt",
                     "bm25_session.idx", "db_session_student_qs.emb", "db_session_student_qs.ivf",
                     "retrieval_qs_dense-exact_student_qs_mc.jsonl", "retrieval_qs_sparse_sc.jsonl",
                     "eval_qs_dense-exact_student_qs.json", "eval_qs_sparse.json",
                     "sweep_qs_student_qs.json", "bench.json", "dialogue_retrieval.log"):
            assert (work / name).exists(), name

    def test_manifest_tracks_index_provenance(self, workspace):
        root, _, _ = workspace
        manifest = json.loads((root / "work" / MANIFEST_NAME).read_text(encoding='utf-8'))
        entry = manifest['artifacts']['db_session_student_qs.emb']
        assert entry['built_from']['name'] == "student_qs.ckpt"
        assert 'timestamp' not in json.dumps(manifest)

    def test_report_contents(self, workspace):
        root, _, _ = workspace
        report = json.loads((root / "work" / "eval_qs_dense-exact_student_qs.json").read_text(encoding='utf-8'))
        assert set(report['coverage']) == {'1', '5'}
        assert report['coverage']['1'] <= report['coverage']['5']
        assert report['proxy'] is True
        assert report['queries'] == {'mc': 8, 'sc': 8}

    def test_retrieval_lines_without_timing(self, workspace):
        root, _, _ = workspace
        lines = (root / "work" / "retrieval_qs_sparse_sc.jsonl").read_text(encoding='utf-8').splitlines()
        assert len(lines) == 8
        row = json.loads(lines[0])
        assert row['elapsed_ms'] is None
        assert len(row['hits']) <= 5

    def test_evaluate_is_byte_identical(self, workspace):
        root, config, _ = workspace
        path = root / "work" / "eval_qs_dense-exact_student_qs.json"
        before = path.read_bytes()
        assert run(config, 'evaluate') == 0
        assert path.read_bytes() == before

    def test_sweep_is_non_increasing(self, workspace):
        root, _, _ = workspace
        sweep = json.loads((root / "work" / "sweep_qs_student_qs.json").read_text(encoding='utf-8'))
        values = [sweep['coverage'][k] for k in sorted(sweep['coverage'], key=int)]
        assert values == sorted(values, reverse=True)

    def test_bench_lists_backends(self, workspace):
        root, _, _ = workspace
        bench = json.loads((root / "work" / "bench.json").read_text(encoding='utf-8'))
        assert sorted(bench['backends']) == ['dense-exact', 'dense-ivf', 'sparse']
        assert bench['backends']['sparse']['scanned_per_query'] is None
        assert bench['backends']['dense-ivf']['std_ms'] == 0.0

    def test_index_of_other_checkpoint_required(self, workspace, capsys):
        root, config, _ = workspace
        code = run(config, 'retrieve', '--checkpoint', 'student_qs_distilled.ckpt')
        assert code == 1
        assert "student_qs_distilled" in capsys.readouterr().err


class TestFailures:

    def test_missing_artifact_names_producer(self, tmp_path, capsys):
        config = write_config(tmp_path)
        assert run(config, 'train-student') == 1
        err = capsys.readouterr().err
        assert "vocab.txt" in err
        assert "build-dataset" in err

    def test_invalid_configuration(self, tmp_path):
        config = write_config(tmp_path)
        assert run(config, 'build-dataset', '--temperature', '0') == 2

    def test_conflicting_configuration(self, tmp_path, capsys):
        config = write_config(tmp_path, batch_size=8)
        assert run(config, 'build-dataset') == 1
        assert "batch_size" in capsys.readouterr().err

    def test_missing_corpus(self, tmp_path):
        config = write_config(tmp_path)
        assert run(config, 'build-dataset') == 1

    def test_distill_refuses_changed_vocabulary(self, tmp_path, capsys):
        config = write_config(tmp_path)
        for step in [('generate-corpus',), ('build-dataset',), ('train-student',),
                     ('train-teacher', '--teacher', 'qs'), ('train-teacher', '--teacher', 'qr')]:
            assert run(config, *step) == 0, step
        vocab = tmp_path / "work" / "vocab.txt"
        lines = vocab.read_text(encoding='utf-8').splitlines()
        first, second = lines[2].split('\t')[0], lines[3].split('\t')[0]
        lines[2], lines[3] = f"{second}\t2", f"{first}\t3"
        vocab.write_text("\n".join(lines) + "\n", encoding='utf-8')
        capsys.readouterr()
        assert run(config, 'distill') == 1
        assert "different vocabulary" in capsys.readouterr().err

    def test_dataset_shortfall(self, tmp_path, capsys):
        config = write_config(tmp_path)
        assert run(config, 'generate-corpus') == 0
        assert run(config, 'build-dataset', '--mc-size', '500') == 1
        assert "MC needs 500" in capsys.readouterr().err
