'''
Console output mirrored into a log file.
Modules import "print" from here instead of using the builtin, so everything printed by the main process also ends up in the log.
'''
from __future__ import annotations
import multiprocessing
import sys
from typing import Optional, TextIO

LOG_FILE: Optional[TextIO] = None

# To store the original built-in print so we can still use it
_builtin_print = print


def openLogFile(path: str) -> None:
    global LOG_FILE
    closeLogFile()
    try:
        LOG_FILE = open(path, 'w', encoding='utf-8')
    except OSError:
        _builtin_print(f'Failed to open log file {path}. Logging to file disabled.')
        LOG_FILE = None


def closeLogFile() -> None:
    global LOG_FILE
    if LOG_FILE:
        LOG_FILE.close()
    LOG_FILE = None


def print(*args, **kwargs) -> None:  # type: ignore
    # Check if we are in the main process
    isMain = multiprocessing.current_process().name == 'MainProcess'
    outputString = ' '.join(map(str, args))

    if isMain:
        stream = kwargs.get('file', sys.stdout)
        stream.write(outputString + '\n')
        if LOG_FILE:
            LOG_FILE.write(outputString + '\n')
            LOG_FILE.flush()
    else:
        # Workers only talk to their own stdout
        _builtin_print(outputString)


def logOnly(text: str) -> None:
    '''Writes text to the log file only (tracebacks, long diagnostics).'''
    if LOG_FILE:
        LOG_FILE.write(text.rstrip('\n') + '\n')
        LOG_FILE.flush()
