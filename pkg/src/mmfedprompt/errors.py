class FedPromptError(Exception):
    pass


class DimensionError(FedPromptError, ValueError):
    pass


class DegenerateVectorError(FedPromptError, ValueError):
    pass


class NonFiniteError(FedPromptError, ValueError):
    pass


class ContractError(FedPromptError, ValueError):
    pass


class InfeasibleError(FedPromptError, ValueError):
    pass


class ConfigError(FedPromptError, ValueError):
    pass
