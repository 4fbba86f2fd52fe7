"""Package logger and a hook that logs uncaught exceptions before the interpreter exits."""

import logging
import sys
import traceback
import typing

__all__ = ["log", "UncaughtHook", "set_log_level"]

log = logging.getLogger("dosac")
log.addHandler(logging.StreamHandler(stream=sys.stdout))
log.setLevel(logging.INFO)


def set_log_level(level: typing.Union[int, str]):
    """Set the level of the package logger.

    :param level: A logging level, e.g. ``logging.DEBUG`` or ``"WARNING"``.
    """
    log.setLevel(level)


class UncaughtHook(object):
    """Registers itself as :data:`sys.excepthook` and logs every uncaught exception."""

    #: the last uncaught exception, kept for the command-line interface
    lastException: typing.Optional[BaseException] = None

    def __init__(self, install: bool = True):
        """Create a new hook.

        :param install: Whether to register the hook with the interpreter right away.
        """
        self._previousHook = sys.excepthook
        if install:
            self.install()

    def install(self):
        """Register :meth:`exception_hook` with the interpreter."""
        sys.excepthook = self.exception_hook

    def uninstall(self):
        """Restore the hook that was active before this one was created."""
        sys.excepthook = self._previousHook

    @staticmethod
    def format_exception(exc_type, exc_value, exc_traceback) -> str:
        return "\n".join(["".join(traceback.format_tb(exc_traceback)), f"{exc_type.__name__}: {exc_value}"])

    def exception_hook(self, exc_type, exc_value, exc_traceback):
        """Function handling uncaught exceptions.
        It is triggered each time an uncaught exception occurs.
        """
        if issubclass(exc_type, KeyboardInterrupt):
            # ignore keyboard interrupt to support console applications
            sys.__excepthook__(exc_type, exc_value, exc_traceback)
        else:
            self.lastException = exc_value
            log_msg = self.format_exception(exc_type, exc_value, exc_traceback)
            log.critical(f"Uncaught exception:\n {log_msg}", exc_info=(exc_type, exc_value, exc_traceback))
