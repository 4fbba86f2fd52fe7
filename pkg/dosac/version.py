from pathlib import Path
from re import error as RegexError


def _get_version():
    root = Path(__file__).resolve().parents[1]
    if (root / ".git").exists() and not (root / ".git/shallow").exists():
        try:
            import setuptools_scm

            return setuptools_scm.get_version(root=str(root))
        except (ImportError, RegexError, LookupError):
            pass
    try:
        from ._version import version

        return version
    except ImportError:
        return "0.0.0-unknown"


__version__ = _get_version()


def code_version() -> dict:
    """Describe the running code for run manifests.

    :return: The package version and, when running from a git checkout, the commit it was built from.
    """
    info = {"package": "dosac", "version": __version__}
    head = Path(__file__).resolve().parents[1] / ".git" / "HEAD"
    if head.exists():
        ref = head.read_text().strip()
        if ref.startswith("ref: "):
            refFile = head.parent / ref[5:]
            ref = refFile.read_text().strip() if refFile.exists() else ref
        info["commit"] = ref
    return info
