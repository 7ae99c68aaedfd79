"""Pure-Python ALU kernel. Same interface as the compiled ``_ckernel``."""

M32 = 0xFFFFFFFF
FLAG_Z, FLAG_N, FLAG_C, FLAG_V = 1, 2, 4, 8


def flags_zn(v: int) -> int:
    return (FLAG_Z if v == 0 else 0) | (FLAG_N if v & 0x80000000 else 0)


def flags_add(a: int, b: int) -> tuple[int, int]:
    r = a + b
    v = r & M32
    f = flags_zn(v)
    if r > M32:
        f |= FLAG_C
    if (a ^ v) & (b ^ v) & 0x80000000:
        f |= FLAG_V
    return v, f


def flags_sub(a: int, b: int) -> tuple[int, int]:
    v = (a - b) & M32
    f = flags_zn(v)
    if a < b:
        f |= FLAG_C
    if (a ^ b) & (a ^ v) & 0x80000000:
        f |= FLAG_V
    return v, f


def alu(op: int, a: int, b: int) -> tuple[int, int]:
    """Result and flags of the two-operand ALU opcodes 0x05..0x0D.

    For SHL/SHR ``b`` is the shift count. DIV by zero raises ZeroDivisionError.
    """
    if op == 0x05:
        return flags_add(a, b)
    if op == 0x06:
        return flags_sub(a, b)
    if op == 0x07:
        v = (a * b) & M32
    elif op == 0x08:
        v = a // b
    elif op == 0x09:
        v = a & b
    elif op == 0x0A:
        v = a | b
    elif op == 0x0B:
        v = a ^ b
    elif op == 0x0C:
        v = (a << b) & M32 if b < 32 else 0
    elif op == 0x0D:
        v = a >> b if b < 32 else 0
    else:
        raise ValueError(f"not an ALU opcode: 0x{op:02X}")
    return v, flags_zn(v)
