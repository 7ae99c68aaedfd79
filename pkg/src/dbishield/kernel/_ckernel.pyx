# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled ALU kernel. Same interface as ``_pykernel``."""

from libc.stdint cimport uint32_t, uint64_t

cdef enum:
    FZ = 1
    FN = 2
    FC = 4
    FV = 8


cdef inline uint32_t _zn(uint32_t v) noexcept nogil:
    return (FZ if v == 0 else 0) | (FN if v & 0x80000000u else 0)


cpdef uint32_t flags_zn(uint32_t v):
    return _zn(v)


cpdef tuple flags_add(uint32_t a, uint32_t b):
    cdef uint64_t r = <uint64_t>a + b
    cdef uint32_t v = <uint32_t>r
    cdef uint32_t f = _zn(v)
    if r > 0xFFFFFFFFu:
        f |= FC
    if (a ^ v) & (b ^ v) & 0x80000000u:
        f |= FV
    return v, f


cpdef tuple flags_sub(uint32_t a, uint32_t b):
    cdef uint32_t v = a - b
    cdef uint32_t f = _zn(v)
    if a < b:
        f |= FC
    if (a ^ b) & (a ^ v) & 0x80000000u:
        f |= FV
    return v, f


cpdef tuple alu(int op, uint32_t a, uint32_t b):
    cdef uint32_t v
    if op == 0x05:
        return flags_add(a, b)
    if op == 0x06:
        return flags_sub(a, b)
    if op == 0x07:
        v = <uint32_t>(<uint64_t>a * b)
    elif op == 0x08:
        if b == 0:
            raise ZeroDivisionError("integer division by zero")
        v = a // b
    elif op == 0x09:
        v = a & b
    elif op == 0x0A:
        v = a | b
    elif op == 0x0B:
        v = a ^ b
    elif op == 0x0C:
        v = a << b if b < 32 else 0
    elif op == 0x0D:
        v = a >> b if b < 32 else 0
    else:
        raise ValueError(f"not an ALU opcode: 0x{op:02X}")
    return v, _zn(v)
