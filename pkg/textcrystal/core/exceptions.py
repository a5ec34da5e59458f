"""
Custom exceptions for the application
"""


class TextCrystalException(Exception):
    """Base exception for textcrystal; carries the CLI exit code"""

    def __init__(self, exit_code: int, detail: str):
        super().__init__(detail)
        self.exit_code = exit_code
        self.detail = detail


class ConfigError(TextCrystalException):
    """Configuration related errors"""

    def __init__(self, detail: str = "Invalid configuration"):
        super().__init__(exit_code=2, detail=detail)


class DataError(TextCrystalException):
    """Malformed or inconsistent input data"""

    def __init__(self, detail: str = "Invalid data"):
        super().__init__(exit_code=3, detail=detail)


class InvalidCrystalError(DataError):
    """A crystal violates its construction invariants"""

    def __init__(self, detail: str = "Invalid crystal"):
        super().__init__(detail=detail)


class UnsupportedFeatureError(DataError):
    """Input uses a feature outside the declared supported subset"""

    def __init__(self, detail: str = "Unsupported feature"):
        super().__init__(detail=f"unsupported: {detail}")


class PromptParseError(DataError):
    """Prompt text lacks a required clause"""

    def __init__(self, detail: str = "Prompt could not be parsed"):
        super().__init__(detail=detail)


class EmbeddingLookupError(DataError):
    """Requested embedding id is absent"""

    def __init__(self, detail: str = "Embedding not found"):
        super().__init__(detail=detail)


class CheckpointError(DataError):
    """Checkpoint version mismatch or corrupt file"""

    def __init__(self, detail: str = "Checkpoint could not be read"):
        super().__init__(detail=detail)


class NumericError(TextCrystalException):
    """Non-finite values or numerical failures"""

    def __init__(self, detail: str = "Numeric failure"):
        super().__init__(exit_code=4, detail=detail)
