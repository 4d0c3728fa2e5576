"""Error handling and custom exceptions"""

from typing import Optional, Dict, Any

EXIT_OK = 0
EXIT_NUMERIC_FAILURE = 1
EXIT_USAGE = 2


class PointCloudError(Exception):
    """Base toolkit error"""

    def __init__(
        self,
        error_code: str,
        message: str,
        exit_code: int = EXIT_USAGE,
        details: Optional[Dict[str, Any]] = None
    ):
        self.error_code = error_code
        self.message = message
        self.exit_code = exit_code
        self.details = details or {}

        super().__init__(f"{error_code}: {message}")

    def to_dict(self) -> Dict[str, Any]:
        return {"error": self.error_code, "message": self.message, **self.details}


class InvalidArgumentError(PointCloudError):
    """Raised when an operation receives arguments outside its domain"""

    def __init__(self, message: str, **details: Any):
        super().__init__(
            error_code="ARG_001",
            message=message,
            exit_code=EXIT_USAGE,
            details=details
        )


class InvalidStateError(PointCloudError):
    """Raised when inputs are individually valid but jointly inconsistent"""

    def __init__(self, message: str, **details: Any):
        super().__init__(
            error_code="STATE_001",
            message=message,
            exit_code=EXIT_USAGE,
            details=details
        )


class NumericFailureError(PointCloudError):
    """Raised when NaN or Inf shows up in an iteration or a loss"""

    def __init__(self, message: str, iteration: Optional[int] = None):
        details = {}
        if iteration is not None:
            details["iteration"] = iteration
        self.iteration = iteration

        super().__init__(
            error_code="NUM_001",
            message=message,
            exit_code=EXIT_NUMERIC_FAILURE,
            details=details
        )


class CheckpointFormatError(PointCloudError):
    """Raised when a checkpoint file cannot be decoded"""

    def __init__(self, path: str, reason: str):
        super().__init__(
            error_code="CKPT_001",
            message=f"チェックポイント '{path}' を読み込めません: {reason}",
            exit_code=EXIT_USAGE,
            details={"path": path}
        )


class DatasetIOError(PointCloudError):
    """Raised when a point, mesh or manifest file cannot be read or written"""

    def __init__(self, path: str, reason: str):
        self.path = path
        super().__init__(
            error_code="IO_001",
            message=f"{path}: {reason}",
            exit_code=EXIT_USAGE,
            details={"path": path}
        )


class ConfigError(PointCloudError):
    """Raised when the experiment configuration contains an invalid key or value"""

    def __init__(self, key: str, reason: str):
        self.key = key
        super().__init__(
            error_code="CFG_001",
            message=f"設定キー '{key}' が不正です: {reason}",
            exit_code=EXIT_USAGE,
            details={"key": key}
        )


class TrainingOrderError(PointCloudError):
    """Raised when UniNet training is requested without a pretrained backbone"""

    def __init__(self, reason: str = "UniNet training requires a pretrained backbone checkpoint"):
        super().__init__(
            error_code="TRAIN_001",
            message=reason,
            exit_code=EXIT_USAGE
        )
