import hashlib
import inspect
import json
import sys
import traceback
from functools import wraps
from pathlib import Path
from typing import Any, Dict, List, Optional, Type

from docopt import DocoptExit, ParsedOptions
from docopt import docopt as docopt_orig

_in_stacktrace_printer = False

COMMANDS: Dict[str, "ExtendedCommand"] = {}


class UserError(Exception):
    def __str__(self) -> str:
        return "Error: " + super().__str__()

    @property
    def message(self) -> str:
        return super().__str__()


class UsageError(UserError):
    pass


class ConfigError(UserError):
    pass


class ParseError(ConfigError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UnknownKey(ConfigError):
    def __init__(self, key: str):
        self.key = key
        super().__init__(f"unknown configuration key '{key}'")


class InvariantViolation(ConfigError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


def describe(e: BaseException) -> str:
    """Exception text without the "Error: " prefix, for embedding in another message."""
    return e.message if isinstance(e, UserError) else f"{type(e).__name__}: {e}"


def docopt(doc: str, argv: List[str] = None, **kwargs) -> Optional[ParsedOptions]:
    """
    docopt that reports usage errors instead of exiting. Returns None when the arguments don't match the usage text.
    """
    try:
        return docopt_orig(doc, argv, **kwargs)
    except DocoptExit as e:
        print(e, file=sys.stderr)
        return None


def register_command(command: Type["ExtendedCommand"]):
    """
    Registers an ExtendedCommand class under its name so the dispatcher can find it.

    :param command: The command class to register
    """
    COMMANDS[command.name] = command()
    return command


def print_stacktrace(func):
    """
    Decorator that prints a stacktrace when an unexpected exception is raised. UserErrors are expected and carry their
    own message, so they are re-raised without a trace.
    """

    @wraps(func)
    def wrapper(*args, **kwargs):
        global _in_stacktrace_printer

        if _in_stacktrace_printer:
            return func(*args, **kwargs)

        try:
            _in_stacktrace_printer = True
            return func(*args, **kwargs)
        except UserError as e:
            raise e
        except Exception as e:
            traceback.print_exc()
            raise e
        finally:
            _in_stacktrace_printer = False

    return wrapper


class PrintStacktraceMetaclass(type):
    """
    Metaclass that wraps all methods in a class with print_stacktrace.
    """

    def __new__(mcs, name, bases, namespace):
        inherited = {}
        for base in reversed(bases):
            inherited.update(vars(base))
        wrapped = {
            attr_name: print_stacktrace(attr)
            for attr_name, attr in {**inherited, **namespace}.items()
            if attr_name != "__new__" and inspect.isfunction(attr)
        }
        return super().__new__(mcs, name, bases, {**namespace, **wrapped})


class ExtendedCommand(metaclass=PrintStacktraceMetaclass):
    """
    Base class for blockevo commands:

    - Argument parsing and validation using docopt
    - Automatic usage printing
    - The class docstring is the docopt usage text
    """

    name: str

    @property
    def docstring(self) -> str:
        if self.__class__.__doc__ is None:
            raise SyntaxError(f"command '{self.name}' has no usage docstring")
        return inspect.cleandoc(self.__class__.__doc__)

    def invoke_with_argv(self, argv: List[str]) -> int:
        opts = docopt(self.docstring, argv)
        if opts is None:
            raise UsageError(f"invalid arguments for '{self.name}', see 'blockevo {self.name} --help'")
        return self.invoke_with_options(opts)

    def invoke_with_options(self, opts: ParsedOptions) -> int:
        raise NotImplementedError


def derive_seed(seed: int, label: str, *indices: Any) -> int:
    """
    Derive an independent 64-bit seed for one component of a run.

    The derivation only depends on the top-level seed, the component label and its indices, so a stream is the same
    regardless of the order in which parallel workers pick up their tasks.
    """
    key = json.dumps([int(seed), label, *[str(i) for i in indices]])
    digest = hashlib.blake2b(key.encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def write_json(path: Path, document: Any) -> None:
    # Byte-stable: insertion order kept, fixed indent, trailing newline.
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(document, indent=2) + "\n")


def read_json(path: Path) -> Any:
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise UserError(f"{path} does not exist")
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: {e.msg}", line=e.lineno)
