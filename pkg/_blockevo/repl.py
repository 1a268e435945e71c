import os
import sys
import warnings
from pathlib import Path
from typing import Any, Dict

from docopt import ParsedOptions
from ptpython import embed
from ptpython.repl import PythonRepl

from _blockevo.arch import NetworkSpec
from _blockevo.report import load_run
from _blockevo.surrogate import PairwiseSurrogateModel, read_curves_csv
from _blockevo.utils import (
    ExtendedCommand,
    UserError,
    read_json,
    register_command,
)

HISTORY_ENV = "BLOCKEVO_PTPYTHON_HISTORY"
DEFAULT_HISTORY = "~/.blockevo_ptpython_history"


def build_namespace(run_dir: Path) -> Dict[str, Any]:
    """The public API plus the artifacts of one run directory."""
    import _blockevo.all

    namespace = {k: v for k, v in vars(_blockevo.all).items() if not k.startswith("__")}

    summary = load_run(run_dir)
    namespace.update(
        run=summary,
        block=summary.block,
        history=summary.history,
        ledger=summary.ledger,
        grid=summary.grid,
    )
    network_path = Path(run_dir) / "network.json"
    namespace["network"] = NetworkSpec.from_dict(read_json(network_path)) if network_path.exists() else None
    namespace["curves"] = {
        path.stem[len("curves_") :]: read_curves_csv(path) for path in sorted(Path(run_dir).glob("curves_*.csv"))
    }
    namespace["surrogates"] = {
        path.stem[len("surrogate_") :]: PairwiseSurrogateModel.load(path)
        for path in sorted(Path(run_dir).glob("surrogate_*.json"))
    }
    return namespace


@register_command
class ShellCommand(ExtendedCommand):
    """
    Open a ptpython shell with a run directory loaded: run, block, history, ledger, grid, network, curves and
    surrogates, next to every public name of the package.

    Usage: blockevo shell <run_dir>
    """

    name = "shell"

    def invoke_with_options(self, opts: ParsedOptions) -> int:
        history_filename = os.environ.get(HISTORY_ENV) or DEFAULT_HISTORY
        if not Path(history_filename).expanduser().parent.is_dir():
            warnings.warn(f"${HISTORY_ENV} points into a missing directory, using default value")
            history_filename = DEFAULT_HISTORY
        history_filename = os.path.expanduser(history_filename)

        if not sys.stdin.isatty():
            raise UserError("the shell can only be launched from a TTY")

        user_ns = build_namespace(Path(opts["<run_dir>"]))

        def ptpy_configure(repl: PythonRepl):
            repl.confirm_exit = False

        try:
            embed(user_ns, history_filename=history_filename, configure=ptpy_configure)
        except SystemExit as e:
            if e.code not in (None, 0):
                print("ptpython exited with code", e.code)
        return 0
