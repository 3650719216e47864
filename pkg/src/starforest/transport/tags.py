"""Tag space layout.

A tag is an unsigned 64-bit integer::

    bit 63      transport control (never used by callers)
    bits 56-62  phase
    bits 32-55  context id (one per star forest or per communicator)
    bits 0-31   sequence number / user operation id

User code may use any tag below ``1 << 32`` (phase 0, context 0).
"""

USER = 0
COLL = 1
SETUP = 2
DATA = 3
DATA_REPLY = 4
PROTOCOL = 5

CONTROL_BIT = 1 << 63
_CTX_MASK = (1 << 24) - 1
_SEQ_MASK = (1 << 32) - 1


def make_tag(phase: int, context: int = 0, seq: int = 0) -> int:
    if not 0 <= phase < 128:
        raise ValueError(f"phase out of range: {phase}")
    return (phase << 56) | ((context & _CTX_MASK) << 32) | (seq & _SEQ_MASK)


def split_tag(tag: int) -> tuple[int, int, int]:
    return (tag >> 56) & 0x7F, (tag >> 32) & _CTX_MASK, tag & _SEQ_MASK
