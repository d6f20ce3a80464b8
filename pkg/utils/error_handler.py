"""
Phân loại Lỗi và Xử lý
Các loại lỗi có cấu trúc để CLI ánh xạ lỗi sang mã thoát và nhật ký.
"""

from enum import Enum
from typing import Optional


class ErrorType(Enum):
    """Các loại lỗi dùng cho xử lý và mã thoát"""
    CONFIG_ERROR = "config_error"          # invalid or unreadable configuration
    ARTIFACT_ERROR = "artifact_error"      # checkpoint/corpus missing
    GRAMMAR_ERROR = "grammar_error"        # malformed tree, height overflow, tree text
    NUMERIC_ERROR = "numeric_error"        # shape mismatch, non-finite values
    EXECUTION_ERROR = "execution_error"    # executor type errors, unknown columns
    DATA_ERROR = "data_error"              # malformed records, dataset integrity
    CONTRACT_ERROR = "contract_error"      # internal invariant violated
    STORAGE_ERROR = "storage_error"        # file I/O, permissions, locks


class ClassifiedError(Exception):
    """Lỗi có cấu trúc kèm phân loại"""

    def __init__(self, error_type: ErrorType, message: str,
                 original_error: Optional[Exception] = None,
                 recoverable: bool = False):
        self.error_type = error_type
        self.message = message
        self.original_error = original_error
        self.recoverable = recoverable
        super().__init__(self.message)

    def __str__(self):
        return f"[{self.error_type.value}] {self.message}"

    def to_dict(self):
        """Chuyển đổi thành từ điển để ghi log có cấu trúc"""
        return {
            "error_type": self.error_type.value,
            "message": self.message,
            "recoverable": self.recoverable,
            "original_error": str(self.original_error) if self.original_error else None
        }


class ConfigError(ClassifiedError):
    """Cấu hình không hợp lệ"""
    def __init__(self, message: str, original_error: Optional[Exception] = None):
        super().__init__(ErrorType.CONFIG_ERROR, message, original_error, recoverable=False)


class MissingArtifactError(ClassifiedError):
    """Artifact bắt buộc chưa tồn tại"""
    def __init__(self, message: str, producer: Optional[str] = None,
                 original_error: Optional[Exception] = None):
        self.producer = producer
        if producer:
            message = f"{message} (run `main.py {producer}` first)"
        super().__init__(ErrorType.ARTIFACT_ERROR, message, original_error, recoverable=False)


class GrammarError(ClassifiedError):
    """Cây truy vấn sai cấu trúc"""
    def __init__(self, message: str, original_error: Optional[Exception] = None):
        super().__init__(ErrorType.GRAMMAR_ERROR, message, original_error, recoverable=False)


class HeightOverflowError(GrammarError):
    """Cây cao hơn chiều cao cân bằng được yêu cầu"""


class TreeParseError(GrammarError):
    """Không phân tích được văn bản của cây"""


class NumericError(ClassifiedError):
    """Giá trị không hữu hạn hoặc yêu cầu số học không hợp lệ"""
    def __init__(self, message: str, original_error: Optional[Exception] = None):
        super().__init__(ErrorType.NUMERIC_ERROR, message, original_error, recoverable=False)


class DimensionError(NumericError):
    """Kích thước các toán hạng không khớp"""


class ExecutionError(ClassifiedError):
    """Không thực thi được truy vấn trên cơ sở dữ liệu"""
    def __init__(self, message: str, original_error: Optional[Exception] = None):
        super().__init__(ErrorType.EXECUTION_ERROR, message, original_error, recoverable=True)


class DataFormatError(ClassifiedError):
    """Bản ghi dữ liệu sai định dạng"""
    def __init__(self, message: str, original_error: Optional[Exception] = None):
        super().__init__(ErrorType.DATA_ERROR, message, original_error, recoverable=False)


class DatasetIntegrityError(DataFormatError):
    """Nội dung dữ liệu vi phạm ràng buộc (ví dụ: truy vấn gold không thực thi được)"""


class ContractViolation(ClassifiedError):
    """Vi phạm bất biến nội bộ"""
    def __init__(self, message: str, original_error: Optional[Exception] = None):
        super().__init__(ErrorType.CONTRACT_ERROR, message, original_error, recoverable=False)


class StorageError(ClassifiedError):
    """Lỗi cấp hệ thống (I/O, quyền, khóa)"""
    def __init__(self, message: str, original_error: Optional[Exception] = None, recoverable: bool = False):
        super().__init__(ErrorType.STORAGE_ERROR, message, original_error, recoverable)
