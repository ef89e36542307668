"""Error types shared across the package.

ConfigError marks bad configuration or misuse of an operation's contract
at setup time (CLI maps it to exit code 2). ContractError marks a runtime
contract violation inside an otherwise valid configuration (exit code 1).
"""


class ConfigError(ValueError):
    pass


class ContractError(RuntimeError):
    pass
