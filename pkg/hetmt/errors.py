"""Exceções do projeto hetmt."""


class HetmtError(Exception):
    """Raiz de todos os erros do projeto."""


class ConfigError(HetmtError, ValueError):
    """Configuração inválida, variante desconhecida ou override malformado."""


class VolumeFormatError(HetmtError, ValueError):
    """Cabeçalho e payload de um volume não batem (ou dtype desconhecido)."""


class PhantomGenerationError(HetmtError):
    def __init__(self, organ, attempts):
        self.organ = organ
        self.attempts = attempts
        super().__init__(f"Falha ao posicionar o órgão '{organ}' após {attempts} tentativas")


class ModelConfigError(HetmtError, ValueError):
    pass


class NumericError(HetmtError, ArithmeticError):
    def __init__(self, layer, message=None):
        self.layer = layer
        super().__init__(message or f"Ativação não finita na camada '{layer}'")


class LossInputError(HetmtError, ValueError):
    """Entradas de loss incompatíveis (shape, valores não finitos, rótulos fora da faixa)."""


class NonFiniteLossError(HetmtError, ArithmeticError):
    def __init__(self, iteration, terms):
        self.iteration = iteration
        self.terms = dict(terms)
        detail = ", ".join(f"{k}={v:.6g}" for k, v in self.terms.items())
        super().__init__(f"Loss não finita na iteração {iteration}: {detail}")


class CheckpointError(HetmtError):
    pass


class StitchPlanError(HetmtError, ValueError):
    pass


class InsufficientSamplesError(HetmtError, ValueError):
    pass


class EvaluationError(HetmtError, ValueError):
    """Máscara vazia, variância nula, classe inválida ou predição ausente."""
