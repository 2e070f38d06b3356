class PthashError(Exception):
    pass


class DuplicateHashError(PthashError):
    """Two keys produced the same (bucket, hash) pair; no MPHF exists for this seed."""

    def __init__(self, bucket_id: int, hash_value: int):
        super().__init__(f"duplicate hash {hash_value:#018x} in bucket {bucket_id}")
        self.bucket_id = bucket_id
        self.hash_value = hash_value


class PilotSearchExhausted(PthashError):
    def __init__(self, bucket_id: int, limit: int):
        super().__init__(f"no pilot below {limit} for bucket {bucket_id}")
        self.bucket_id = bucket_id
        self.limit = limit


class BuildError(PthashError):
    """Construction failed for every seed tried."""

    def __init__(self, message: str, attempts: list[BaseException]):
        super().__init__(message)
        self.attempts = attempts


class EncodingError(PthashError, ValueError):
    pass


class BudgetExceeded(PthashError, MemoryError):
    pass


class SerializationError(PthashError):
    pass


class BadMagic(SerializationError):
    pass


class VersionMismatch(SerializationError):
    pass


class TruncatedStream(SerializationError):
    pass
