'''
Plots training histories (history.csv written by "efpn.py train") into one standalone HTML page.
Usage: python utility_scripts/plot_history.py output/history.csv other_run/history.csv -o history.html
'''
from __future__ import annotations
import argparse
import os
from typing import List, Sequence
import pandas as pd
from plotly.subplots import make_subplots  # type: ignore
import plotly.graph_objects as go  # type: ignore

PANELS = [
    ('Loss', ['train_loss', 'val_loss']),
    ('Validation F1', ['val_f1']),
    ('Validation IoU (with background)', ['val_iou']),
]


def readHistory(path: str) -> pd.DataFrame:
    df = pd.read_csv(path, sep=';')
    missing = [c for _, columns in PANELS for c in columns if c not in df.columns] + (['epoch'] if 'epoch' not in df.columns else [])
    if missing:
        raise ValueError(f'{path} is not a training history, missing columns {missing}')
    return df


def runName(path: str) -> str:
    folder = os.path.basename(os.path.dirname(os.path.abspath(path)))
    return folder or os.path.splitext(os.path.basename(path))[0]


def buildFigure(paths: Sequence[str]) -> go.Figure:
    figure = make_subplots(rows=len(PANELS), cols=1, shared_xaxes=True, subplot_titles=[title for title, _ in PANELS])
    for path in paths:
        df = readHistory(path)
        name = runName(path)
        for row, (_, columns) in enumerate(PANELS, start=1):
            for column in columns:
                figure.add_trace(  # type: ignore
                    go.Scatter(
                        x=df['epoch'],
                        y=df[column],
                        mode='lines',
                        name=f'{name} {column}',
                        line=dict(dash='dot' if column.startswith('val') and row == 1 else 'solid'),
                    ),
                    row=row, col=1)
    figure.update_xaxes(title_text='Epoch', row=len(PANELS), col=1)
    figure.update_layout(height=300 * len(PANELS), hovermode='x unified')  # type: ignore
    return figure


def main(argv: List[str] = None) -> None:
    parser = argparse.ArgumentParser(description='Plot loss, F1 and IoU curves of one or more training runs.')
    parser.add_argument('paths', nargs='+', help='history.csv files')
    parser.add_argument('-o', '--output', default='history.html', help='HTML file to write (default: history.html)')
    args = parser.parse_args(argv)

    buildFigure(args.paths).write_html(args.output, include_plotlyjs='cdn')
    print(f'Wrote {args.output}')


if __name__ == '__main__':
    main()
