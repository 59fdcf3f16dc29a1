import hashlib
from pathlib import Path
from typing import Union

from models.errors import ChecksumMismatchError

_CHUNK_SIZE = 1 << 20


def file_sha256(path: Union[str, Path]) -> str:
    """Hex SHA-256 of a file, read in 1 MiB chunks"""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(_CHUNK_SIZE), b""):
            digest.update(chunk)
    return digest.hexdigest()


def verify_checksum(path: Union[str, Path], expected_checksum: str) -> None:
    actual = file_sha256(path)
    if actual.lower() != expected_checksum.strip().lower():
        raise ChecksumMismatchError(str(path), expected_checksum, actual)
