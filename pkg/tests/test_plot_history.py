import pandas as pd
import pytest
import plot_history
from trainer import HISTORY_COLUMNS


def writeHistory(folder, rows=3):
    folder.mkdir()
    path = folder / 'history.csv'
    pd.DataFrame({'epoch': range(rows), 'train_loss': [1.0 / (e + 1) for e in range(rows)],
                  'val_loss': [1.2 / (e + 1) for e in range(rows)], 'val_iou': [0.1 * e for e in range(rows)],
                  'val_f1': [0.2 * e for e in range(rows)]})[HISTORY_COLUMNS].to_csv(path, sep=';', index=False)
    return str(path)


def test_one_trace_per_column_and_run(tmp_path):
    paths = [writeHistory(tmp_path / 'a'), writeHistory(tmp_path / 'b')]
    figure = plot_history.buildFigure(paths)
    assert len(figure.data) == 2 * 4
    assert figure.data[0].name == 'a train_loss'


def test_rejects_files_that_are_not_histories(tmp_path):
    path = tmp_path / 'other.csv'
    pd.DataFrame({'epoch': [0], 'loss': [1.0]}).to_csv(path, sep=';', index=False)
    with pytest.raises(ValueError, match='missing columns'):
        plot_history.readHistory(str(path))


def test_main_writes_html(tmp_path):
    output = tmp_path / 'history.html'
    plot_history.main([writeHistory(tmp_path / 'run'), '-o', str(output)])
    assert output.read_text(encoding='utf-8').lstrip().lower().startswith('<html')
