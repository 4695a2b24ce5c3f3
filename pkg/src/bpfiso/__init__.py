"""Simulator of protection-key based isolation for BPF-style programs."""
from __future__ import annotations

from .isa import Program, assemble, disassemble
from .runtime import Machine, Outcome, ProtectionConfig, Verdict
from .verifier import BugFlags, verify

__all__ = [
    "BugFlags", "Machine", "Outcome", "Program", "ProtectionConfig", "Verdict",
    "assemble", "disassemble", "verify",
]
