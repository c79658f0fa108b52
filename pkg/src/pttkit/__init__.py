"""Process-tensor tomography toolkit."""
