import json
import os
import numpy as np
import pandas as pd
import pytest
from PIL import Image
from efpn import main

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
TOY = os.path.join(ROOT, 'config_toy.ini')
FULL = os.path.join(ROOT, 'config.ini')
SMALL = ['--set', 'Model.Input size=16', '--set', 'Model.Base channels=4', '--set', 'Model.Lateral channels=4',
         '--set', 'Synthetic.Image size=16', '--set', 'Synthetic.Samples=12', '--set', 'Training.Epochs=1',
         '--set', 'Training.Batch size=4', '--set', 'Training.Early stopping patience=0']


@pytest.fixture(autouse=True)
def inRoot(monkeypatch):
    monkeypatch.chdir(ROOT)


def readJson(path):
    with open(path, encoding='utf-8') as f:
        return json.load(f)


def test_params_reports_calibrated_total(tmp_path, capsys):
    assert main(['params', '-c', FULL, '-o', str(tmp_path)]) == 0
    assert 'Total trainable parameters: 1,324,656' in capsys.readouterr().out
    table = pd.read_csv(tmp_path / 'params.csv', sep=';')
    assert int(table['params'].sum()) == 1324656
    assert (table['seed'] == 0).all()
    assert (tmp_path / 'efpn.log').exists()


def test_flops_reports_ratio(tmp_path, capsys):
    assert main(['flops', '-c', FULL, '-o', str(tmp_path)]) == 0
    line = next(l for l in capsys.readouterr().out.splitlines() if l.startswith('FLOP ratio vs inception reference'))
    assert float(line.split(':')[1]) >= 7.0


def test_tables_carry_the_run_seed(tmp_path):
    for command in ('params', 'flops'):
        assert main([command, '-c', FULL, '-o', str(tmp_path), '--set', 'General.Seed=11']) == 0
        assert (pd.read_csv(tmp_path / f'{command}.csv', sep=';')['seed'] == 11).all()


def test_invalid_configuration_exits_before_writing(tmp_path, capsys):
    output = tmp_path / 'out'
    code = main(['train', '-c', TOY, '-o', str(output), '--synthetic', '--set', 'Training.Split ratios=0.5, 0.5, 0.5'])
    assert code == 2
    assert not output.exists()
    assert capsys.readouterr().err.startswith('efpn train: config error: ')


def test_missing_config_file(tmp_path, capsys):
    assert main(['params', '-c', str(tmp_path / 'absent.ini'), '-o', str(tmp_path)]) == 2
    assert 'does not exist' in capsys.readouterr().err


def test_missing_checkpoint_is_file_error(tmp_path, capsys):
    code = main(['eval', str(tmp_path / 'absent.efpn'), '-c', TOY, '-o', str(tmp_path), '--synthetic'] + SMALL)
    assert code == 5
    assert 'file error' in capsys.readouterr().err


def test_decompose_separates_conflicting_classes(tmp_path):
    code = main(['decompose', '-c', FULL, '-o', str(tmp_path), '--synthetic', '--set', 'Synthetic.Samples=30',
                 '--set', 'Synthetic.Image size=32'])
    assert code == 0
    groups = readJson(tmp_path / 'groups.json')
    assert len(groups['groups']) == 3
    assert all(len(g) == 3 for g in groups['groups'])
    assert not any({'Crack', 'Fracture'} <= set(names) for names in groups['group_names'])
    assert groups['seed'] == 0


def test_synth_writes_dataset(tmp_path):
    assert main(['synth', '-c', TOY, '-o', str(tmp_path)] + SMALL) == 0
    assert len(os.listdir(tmp_path / 'dataset' / 'images')) == 12
    assert len(os.listdir(tmp_path / 'dataset' / 'masks')) == 12


def test_augment_refuses_to_write_into_its_dataset(tmp_path, capsys):
    assert main(['synth', '-c', TOY, '-o', str(tmp_path)] + SMALL) == 0
    dataset = tmp_path / 'dataset'
    code = main(['augment', '-c', TOY, '-d', str(dataset), '-o', str(dataset / 'balanced_out')] + SMALL)
    assert code == 6
    assert 'usage error' in capsys.readouterr().err


def test_augment_writes_plan(tmp_path):
    code = main(['augment', '-c', TOY, '-o', str(tmp_path), '--synthetic', '--set', 'Augmentation.Balance cap=5'] + SMALL)
    assert code == 0
    plan = readJson(tmp_path / 'balance_plan.json')
    assert plan['cap'] == 5 and plan['seed'] == 0
    assert os.path.isdir(tmp_path / 'balanced' / 'images')


def test_gradcheck_on_small_model(tmp_path):
    assert main(['gradcheck', '-c', TOY, '-o', str(tmp_path)] + SMALL) == 0
    reports = readJson(tmp_path / 'gradcheck.json')['reports']
    assert [r['op'] for r in reports][-1] == 'efpn_model'
    assert all(r['passed'] for r in reports)


def test_train_eval_predict(tmp_path):
    trained = tmp_path / 'trained'
    assert main(['train', '-c', TOY, '-o', str(trained), '--synthetic', '-q'] + SMALL) == 0
    for name in ('model.efpn', 'history.csv', 'metrics.json', 'training_state.npz', 'efpn.log'):
        assert (trained / name).exists(), name
    assert (pd.read_csv(trained / 'history.csv', sep=';')['seed'] == 0).all()
    metrics = readJson(trained / 'metrics.json')
    assert metrics['split'] == 'test' and metrics['epochs_run'] == 1
    assert len(metrics['test_ids']) == 1

    checkpoint = str(trained / 'model.efpn')
    results = []
    for run in ('eval1', 'eval2'):
        assert main(['eval', checkpoint, '-c', TOY, '-o', str(tmp_path / run), '--synthetic'] + SMALL) == 0
        results.append((tmp_path / run / 'metrics.json').read_text())
    assert results[0] == results[1]
    assert readJson(tmp_path / 'eval1' / 'metrics.json')['samples'] == 12

    image = tmp_path / 'frame.png'
    Image.fromarray(np.full((20, 24, 3), 120, dtype=np.uint8)).save(image)
    assert main(['predict', checkpoint, str(image), '-c', TOY, '-o', str(tmp_path / 'pred')] + SMALL) == 0
    with Image.open(tmp_path / 'pred' / 'frame_mask.png') as mask:
        assert mask.size == (24, 20)
    assert (tmp_path / 'pred' / 'frame_overlay.png').exists()


def test_resume_continues_training(tmp_path):
    first = tmp_path / 'first'
    assert main(['train', '-c', TOY, '-o', str(first), '--synthetic', '-q'] + SMALL) == 0
    second = tmp_path / 'second'
    code = main(['train', '-c', TOY, '-o', str(second), '--synthetic', '-q', '--resume',
                 str(first / 'training_state.npz')] + SMALL + ['--set', 'Training.Epochs=2'])
    assert code == 0
    assert readJson(second / 'metrics.json')['epochs_run'] == 2
