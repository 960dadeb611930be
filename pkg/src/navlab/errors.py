"""Exception hierarchy shared by all navlab modules."""


class NavlabError(Exception):
    """Base class; the CLI maps these to exit codes."""


class ValidationError(NavlabError):
    """Bad user input: config values, flags, file contents. Exit code 1."""


class ConfigError(ValidationError):
    pass


class SceneError(NavlabError):
    pass


class NumericError(NavlabError):
    """Non-finite values or underflow detected during training."""


class CheckpointError(NavlabError):
    pass


class BranchError(NavlabError):
    pass
