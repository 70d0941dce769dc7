"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: DataError -> 3, ModelError -> 4,
anything argparse rejects -> 2.
"""


class ToolkitError(Exception):
    """Base class for all tsgdetect errors."""


class DataError(ToolkitError):
    """Invalid or corrupt data: images, manifests, feature files, layouts."""


class FormatError(DataError):
    """A serialized artifact violates its file format contract."""


class LayoutError(DataError):
    """A dataset directory tree does not match the expected layout."""


class ModelError(ToolkitError):
    """Checkpoints, predictor handles, or classifier configs are unusable."""
