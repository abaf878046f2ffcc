class UsageError(ValueError):
    """Raised when a caller violates an input contract."""


class DownloadError(RuntimeError):
    """A dataset download failed. Retrying may help."""

    def __init__(self, url, reason):
        self.url = url
        self.reason = reason
        super().__init__(f"failed to download {url}: {reason}")


class CorruptionError(RuntimeError):
    """A cached or downloaded file does not match its recorded checksum."""


class EmptyClassError(UsageError):
    """A per-class metric was requested for a class with no samples."""


class TrainingDiverged(RuntimeError):
    def __init__(self, step, last_checkpoint):
        self.step = step
        self.last_checkpoint = last_checkpoint
        super().__init__(
            f"non-finite generator loss at step {step}; "
            f"last good checkpoint: {last_checkpoint}"
        )
