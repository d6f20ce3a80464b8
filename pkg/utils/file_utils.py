"""
Các Thao Tác Tệp An Toàn
Ghi nguyên tử, tiện ích JSON, hash nội dung và khóa thư mục đầu ra.
"""

import os
import json
import hashlib
from pathlib import Path
from typing import Any, Iterable, Optional, Union

from utils.error_handler import StorageError, MissingArtifactError

PathLike = Union[str, Path]


def atomic_write(content: bytes, filepath: PathLike) -> None:
    """
    Ghi tệp nguyên tử qua tệp tạm + đổi tên.
    Sự cố giữa chừng không để lại tệp ghi dở.
    """
    path = Path(filepath)
    temp_path = path.with_suffix(path.suffix + '.tmp')

    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(temp_path, 'wb') as f:
            f.write(content)
        os.replace(temp_path, path)
    except OSError as e:
        if temp_path.exists():
            try:
                temp_path.unlink()
            except OSError:
                pass
        raise StorageError(f"Cannot write file {filepath}: {e}", original_error=e)


def write_json(data: Any, filepath: PathLike, indent: Optional[int] = 2) -> None:
    """Tuần tự hóa sang JSON với thứ tự khóa ổn định và ghi nguyên tử"""
    text = json.dumps(data, ensure_ascii=False, indent=indent, sort_keys=False)
    atomic_write((text + "\n").encode('utf-8'), filepath)


def read_json(filepath: PathLike, producer: Optional[str] = None) -> Any:
    """
    Đọc tệp JSON.

    Args:
        filepath: Tệp cần đọc
        producer: Lệnh CLI tạo ra tệp, được nêu trong lỗi nếu tệp thiếu
    """
    path = Path(filepath)
    if not path.exists():
        raise MissingArtifactError(f"Missing artifact: {path}", producer=producer)
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise StorageError(f"Cannot read {path}: {e}", original_error=e)


def write_lines(lines: Iterable[str], filepath: PathLike) -> None:
    """Write text lines (JSONL) atomically"""
    body = "".join(line + "\n" for line in lines)
    atomic_write(body.encode('utf-8'), filepath)


def generate_content_hash(filepath: PathLike, algorithm: str = 'sha256') -> str:
    """
    Tạo hash nội dung cho tệp.

    Args:
        filepath: Đường dẫn tệp
        algorithm: 'md5' hoặc 'sha256'

    Returns:
        Tóm tắt hex của nội dung tệp
    """
    hash_obj = hashlib.md5() if algorithm == 'md5' else hashlib.sha256()
    try:
        with open(filepath, 'rb') as f:
            for chunk in iter(lambda: f.read(65536), b''):
                hash_obj.update(chunk)
        return hash_obj.hexdigest()
    except OSError as e:
        raise StorageError(f"Cannot hash {filepath}: {e}", original_error=e)


def hash_files(filepaths: Iterable[PathLike]) -> str:
    """Combined SHA-256 over several files, in the given order"""
    hash_obj = hashlib.sha256()
    for filepath in filepaths:
        hash_obj.update(Path(filepath).name.encode('utf-8'))
        hash_obj.update(generate_content_hash(filepath).encode('ascii'))
    return hash_obj.hexdigest()


def hash_bytes(*chunks: bytes) -> str:
    """SHA-256 over a sequence of byte strings"""
    hash_obj = hashlib.sha256()
    for chunk in chunks:
        hash_obj.update(chunk)
    return hash_obj.hexdigest()


def hash_json(data: Any) -> str:
    """SHA-256 of canonical JSON (sorted keys, no whitespace)"""
    text = json.dumps(data, sort_keys=True, separators=(',', ':'), ensure_ascii=False)
    return hashlib.sha256(text.encode('utf-8')).hexdigest()


def ensure_directory(dirpath: PathLike) -> Path:
    """Tạo thư mục nếu cần và trả về nó"""
    path = Path(dirpath)
    path.mkdir(parents=True, exist_ok=True)
    return path


class DirectoryLock:
    """
    Tệp khóa bảo vệ thư mục đầu ra.
    Mỗi thư mục đầu ra chỉ chạy một lệnh tại một thời điểm.
    """

    def __init__(self, dirpath: PathLike, name: str = ".lock"):
        self.path = ensure_directory(dirpath) / name
        self._fd: Optional[int] = None

    def acquire(self) -> None:
        try:
            self._fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as e:
            raise StorageError(
                f"Output directory is locked by another command: {self.path} "
                f"(remove the file if no command is running)", original_error=e)
        os.write(self._fd, str(os.getpid()).encode('ascii'))

    def release(self) -> None:
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None
            try:
                self.path.unlink()
            except FileNotFoundError:
                pass

    def __enter__(self) -> "DirectoryLock":
        self.acquire()
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.release()
