"""Firmware toolchain for target nodes: a small radio-scripting language,
a verified bytecode format and the sandboxed interpreter run on the
emulated device.

Source language, one statement per line, ``#`` starts a comment:

    SET_CHANNEL <int>
    SET_POWER <int>
    TX <hexbytes> [REPEAT <int> [INTERVAL <ms>]]
    RX TIMEOUT <ms>
    SENSE WINDOW <ms>
    REPORT <expr>
    LOOP <int> ... END

Expressions combine ``RX_DATA``, ``RX_COUNT`` and ``OCCUPANCY`` (percent as
an integer) with int and hex-bytes literals through ``== + - * /``; ``*``
and ``/`` bind tighter than ``+`` and ``-``, which bind tighter than
``==``. A bare digit run is an int; a literal with an even number of hex
digits including at least one letter (``DEADBEEF``, ``00ff``) is bytes.

The interpreter is budgeted and trapping: instruction budget, value stack,
loop nesting and live value memory are all bounded, division by zero and
out-of-plan channels trap. A trap ends the run; it never escapes into the
hosting daemon.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum

from .radio import MS, RadioPort, RxCmd, SenseCmd, TxCmd, WaitCmd

MAGIC = b"CFW1"
MAX_TX_PAYLOAD = 255
MAX_REPEAT = 10_000
MAX_LOOP_COUNT = 1_000_000
STACK_LIMIT = 64
LOOP_DEPTH_LIMIT = 8
MEMORY_LIMIT = 64 * 1024
DEFAULT_BUDGET = 1_000_000

REGISTERS = {"RX_DATA": 0, "RX_COUNT": 1, "OCCUPANCY": 2}


class Opcode(IntEnum):
    HALT = 0
    PUSH_INT = 1    # a = value
    PUSH_CONST = 2  # a = constant index
    LOAD = 3        # a = register id
    EQ = 4
    ADD = 5
    SUB = 6
    MUL = 7
    DIV = 8
    SET_CHANNEL = 9   # a = channel
    SET_POWER = 10    # a = dBm
    TX = 11           # a = payload const, b = repeat, c = interval ms
    RX = 12           # a = timeout ms
    SENSE = 13        # a = window ms
    REPORT = 14
    LOOP_BEGIN = 15   # a = count, b = pc just past the matching LOOP_END
    LOOP_END = 16     # a = pc of the matching LOOP_BEGIN


# Net stack effect of the expression opcodes; None marks control opcodes
# with effect 0 handled explicitly by the verifier.
_PUSHERS = {Opcode.PUSH_INT, Opcode.PUSH_CONST, Opcode.LOAD}
_BINOPS = {Opcode.EQ, Opcode.ADD, Opcode.SUB, Opcode.MUL, Opcode.DIV}


class FirmwareError(Exception):
    """Base class for toolchain errors."""


class CompileError(FirmwareError):
    def __init__(self, line_no: int, message: str, kind: str = "syntax"):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no
        self.kind = kind


class FormatError(FirmwareError):
    """Bytecode container is not well-formed."""


class VerifyError(FirmwareError):
    def __init__(self, pc: int, message: str):
        super().__init__(f"pc {pc}: {message}")
        self.pc = pc


class FirmwareTrap(FirmwareError):
    """Raised by the interpreter when a run violates a sandbox bound."""

    def __init__(self, kind: str, detail: str, pc: int):
        super().__init__(f"{kind} trap at pc {pc}: {detail}")
        self.kind = kind
        self.detail = detail
        self.pc = pc


@dataclass(frozen=True)
class Instr:
    op: int
    a: int = 0
    b: int = 0
    c: int = 0


@dataclass
class Program:
    consts: list[bytes] = field(default_factory=list)
    instrs: list[Instr] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Container format
# ---------------------------------------------------------------------------

_INSTR = struct.Struct(">Biii")


def serialize(program: Program) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack(">H", len(program.consts))
    for const in program.consts:
        out += struct.pack(">H", len(const)) + const
    out += struct.pack(">I", len(program.instrs))
    for ins in program.instrs:
        out += _INSTR.pack(ins.op, ins.a, ins.b, ins.c)
    return bytes(out)


def deserialize(data: bytes) -> Program:
    if data[:4] != MAGIC:
        raise FormatError("bad magic")
    view, offset = data, 4

    def take(fmt: str):
        nonlocal offset
        size = struct.calcsize(fmt)
        if offset + size > len(view):
            raise FormatError("truncated bytecode")
        values = struct.unpack_from(fmt, view, offset)
        offset += size
        return values

    consts = []
    (n_consts,) = take(">H")
    for _ in range(n_consts):
        (length,) = take(">H")
        if offset + length > len(view):
            raise FormatError("truncated constant")
        consts.append(bytes(view[offset:offset + length]))
        offset += length
    (n_instrs,) = take(">I")
    instrs = []
    for _ in range(n_instrs):
        op, a, b, c = take(">Biii")
        instrs.append(Instr(op, a, b, c))
    if offset != len(view):
        raise FormatError("trailing bytes after bytecode")
    return Program(consts, instrs)


# ---------------------------------------------------------------------------
# Verifier
# ---------------------------------------------------------------------------


def verify(program: Program) -> None:
    """Static checks so the interpreter can trust program shape: opcode and
    operand ranges, matched structured loops, bounded stack at every point.
    """
    instrs = program.instrs
    if not instrs:
        raise VerifyError(0, "empty program")
    if instrs[-1].op != Opcode.HALT:
        raise VerifyError(len(instrs) - 1, "program must end with HALT")
    depth = 0
    loop_stack: list[tuple[int, int]] = []  # (begin pc, depth at entry)
    for pc, ins in enumerate(instrs):
        try:
            op = Opcode(ins.op)
        except ValueError:
            raise VerifyError(pc, f"unknown opcode {ins.op}") from None
        if op == Opcode.PUSH_CONST and not 0 <= ins.a < len(program.consts):
            raise VerifyError(pc, f"constant index {ins.a} out of range")
        if op == Opcode.LOAD and ins.a not in REGISTERS.values():
            raise VerifyError(pc, f"unknown register {ins.a}")
        if op == Opcode.TX:
            if not 0 <= ins.a < len(program.consts):
                raise VerifyError(pc, f"payload constant {ins.a} out of range")
            if len(program.consts[ins.a]) > MAX_TX_PAYLOAD:
                raise VerifyError(pc, "payload exceeds radio frame limit")
            if not 1 <= ins.b <= MAX_REPEAT:
                raise VerifyError(pc, f"repeat {ins.b} out of range")
            if ins.c < 0:
                raise VerifyError(pc, "negative interval")
        if op in (Opcode.RX, Opcode.SENSE) and ins.a <= 0:
            raise VerifyError(pc, "duration must be positive")
        if op in _PUSHERS:
            depth += 1
        elif op in _BINOPS:
            if depth < 2:
                raise VerifyError(pc, "operand stack underflow")
            depth -= 1
        elif op == Opcode.REPORT:
            if depth < 1:
                raise VerifyError(pc, "REPORT with empty stack")
            depth -= 1
        elif op == Opcode.LOOP_BEGIN:
            if not 0 <= ins.a <= MAX_LOOP_COUNT:
                raise VerifyError(pc, f"loop count {ins.a} out of range")
            if not pc < ins.b <= len(instrs):
                raise VerifyError(pc, "loop exit target out of range")
            if instrs[ins.b - 1].op != Opcode.LOOP_END:
                raise VerifyError(pc, "loop exit does not follow a LOOP_END")
            if len(loop_stack) >= LOOP_DEPTH_LIMIT:
                raise VerifyError(pc, "loop nesting too deep")
            loop_stack.append((pc, depth))
        elif op == Opcode.LOOP_END:
            if not loop_stack:
                raise VerifyError(pc, "LOOP_END without LOOP_BEGIN")
            begin_pc, entry_depth = loop_stack.pop()
            if ins.a != begin_pc:
                raise VerifyError(pc, "LOOP_END does not match its LOOP_BEGIN")
            if instrs[begin_pc].b != pc + 1:
                raise VerifyError(pc, "loop begin/end disagree on extent")
            if depth != entry_depth:
                raise VerifyError(pc, "loop body must leave the stack balanced")
        if depth > STACK_LIMIT:
            raise VerifyError(pc, "operand stack too deep")
    if loop_stack:
        raise VerifyError(loop_stack[-1][0], "unterminated loop")


def load(data: bytes) -> Program:
    program = deserialize(data)
    verify(program)
    return program


# ---------------------------------------------------------------------------
# Compiler
# ---------------------------------------------------------------------------


def _classify_literal(token: str) -> int | bytes | None:
    if token.isdigit():
        return int(token)
    if (len(token) >= 2 and len(token) % 2 == 0
            and all(c in "0123456789abcdefABCDEF" for c in token)
            and any(c.isalpha() for c in token)):
        return bytes.fromhex(token)
    return None


class _ExprCompiler:
    """Recursive descent over one REPORT expression."""

    def __init__(self, tokens: list[str], line_no: int, emit):
        self.tokens = tokens
        self.pos = 0
        self.line_no = line_no
        self.emit = emit

    def _peek(self) -> str | None:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def _take(self) -> str:
        token = self._peek()
        if token is None:
            raise CompileError(self.line_no, "expression ends unexpectedly")
        self.pos += 1
        return token

    def compile(self) -> None:
        self._equality()
        if self._peek() is not None:
            raise CompileError(self.line_no, f"unexpected token {self._peek()!r}")

    def _equality(self) -> None:
        self._sum()
        while self._peek() == "==":
            self._take()
            self._sum()
            self.emit(Instr(Opcode.EQ))

    def _sum(self) -> None:
        self._product()
        while self._peek() in ("+", "-"):
            op = self._take()
            self._product()
            self.emit(Instr(Opcode.ADD if op == "+" else Opcode.SUB))

    def _product(self) -> None:
        self._atom()
        while self._peek() in ("*", "/"):
            op = self._take()
            self._atom()
            self.emit(Instr(Opcode.MUL if op == "*" else Opcode.DIV))

    def _atom(self) -> None:
        token = self._take()
        if token in REGISTERS:
            self.emit(Instr(Opcode.LOAD, REGISTERS[token]))
            return
        literal = _classify_literal(token)
        if isinstance(literal, int):
            self.emit(Instr(Opcode.PUSH_INT, literal))
        elif isinstance(literal, bytes):
            self.emit(Instr(Opcode.PUSH_CONST, self._const(literal)))
        elif token in ("+", "-", "*", "/", "=="):
            raise CompileError(self.line_no, f"operator {token!r} needs a left operand")
        else:
            raise CompileError(self.line_no, f"unknown identifier {token!r}", kind="semantic")

    def _const(self, value: bytes) -> int:
        return self.emit.add_const(value)


class _Emitter:
    def __init__(self):
        self.program = Program()

    def __call__(self, instr: Instr) -> None:
        self.program.instrs.append(instr)

    def add_const(self, value: bytes) -> int:
        # Pool deduplication keeps images deterministic for identical input.
        try:
            return self.program.consts.index(value)
        except ValueError:
            self.program.consts.append(value)
            return len(self.program.consts) - 1


def _int_arg(token: str, line_no: int, what: str, minimum: int | None = None,
             maximum: int | None = None) -> int:
    try:
        value = int(token)
    except ValueError:
        raise CompileError(line_no, f"{what} must be an integer, got {token!r}") from None
    if minimum is not None and value < minimum:
        raise CompileError(line_no, f"{what} must be >= {minimum}", kind="semantic")
    if maximum is not None and value > maximum:
        raise CompileError(line_no, f"{what} must be <= {maximum}", kind="semantic")
    return value


def compile_source(text: str) -> bytes:
    """Compile firmware source to verified bytecode."""
    emit = _Emitter()
    open_loops: list[tuple[int, int]] = []  # (line_no, LOOP_BEGIN pc)
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        head, args = tokens[0], tokens[1:]
        if head == "SET_CHANNEL":
            if len(args) != 1:
                raise CompileError(line_no, "usage: SET_CHANNEL <int>")
            emit(Instr(Opcode.SET_CHANNEL, _int_arg(args[0], line_no, "channel", minimum=0)))
        elif head == "SET_POWER":
            if len(args) != 1:
                raise CompileError(line_no, "usage: SET_POWER <dBm>")
            try:
                power = int(args[0])
            except ValueError:
                raise CompileError(line_no, f"power must be an integer, got {args[0]!r}") from None
            emit(Instr(Opcode.SET_POWER, power))
        elif head == "TX":
            if not args:
                raise CompileError(line_no, "usage: TX <hexbytes> [REPEAT n [INTERVAL ms]]")
            payload = _classify_literal(args[0])
            if not isinstance(payload, bytes):
                raise CompileError(line_no, f"TX payload must be hex bytes, got {args[0]!r}")
            if len(payload) > MAX_TX_PAYLOAD:
                raise CompileError(line_no, f"payload exceeds {MAX_TX_PAYLOAD} bytes",
                                   kind="semantic")
            repeat, interval = 1, 0
            rest = args[1:]
            if rest and rest[0] == "REPEAT":
                if len(rest) < 2:
                    raise CompileError(line_no, "REPEAT needs a count")
                repeat = _int_arg(rest[1], line_no, "repeat", minimum=1, maximum=MAX_REPEAT)
                rest = rest[2:]
                if rest and rest[0] == "INTERVAL":
                    if len(rest) < 2:
                        raise CompileError(line_no, "INTERVAL needs milliseconds")
                    interval = _int_arg(rest[1], line_no, "interval", minimum=0)
                    rest = rest[2:]
            if rest:
                raise CompileError(line_no, f"unexpected tokens after TX: {' '.join(rest)}")
            emit(Instr(Opcode.TX, emit.add_const(payload), repeat, interval))
        elif head == "RX":
            if len(args) != 2 or args[0] != "TIMEOUT":
                raise CompileError(line_no, "usage: RX TIMEOUT <ms>")
            emit(Instr(Opcode.RX, _int_arg(args[1], line_no, "timeout", minimum=1)))
        elif head == "SENSE":
            if len(args) != 2 or args[0] != "WINDOW":
                raise CompileError(line_no, "usage: SENSE WINDOW <ms>")
            emit(Instr(Opcode.SENSE, _int_arg(args[1], line_no, "window", minimum=1)))
        elif head == "REPORT":
            if not args:
                raise CompileError(line_no, "REPORT needs an expression")
            _ExprCompiler(args, line_no, emit).compile()
            emit(Instr(Opcode.REPORT))
        elif head == "LOOP":
            if len(args) != 1:
                raise CompileError(line_no, "usage: LOOP <count>")
            count = _int_arg(args[0], line_no, "loop count", minimum=0,
                             maximum=MAX_LOOP_COUNT)
            if len(open_loops) >= LOOP_DEPTH_LIMIT:
                raise CompileError(line_no, "loop nesting too deep", kind="semantic")
            open_loops.append((line_no, len(emit.program.instrs)))
            emit(Instr(Opcode.LOOP_BEGIN, count, 0))
        elif head == "END":
            if args:
                raise CompileError(line_no, "END takes no arguments")
            if not open_loops:
                raise CompileError(line_no, "END without LOOP")
            _, begin_pc = open_loops.pop()
            end_pc = len(emit.program.instrs)
            emit(Instr(Opcode.LOOP_END, begin_pc))
            begin = emit.program.instrs[begin_pc]
            emit.program.instrs[begin_pc] = Instr(begin.op, begin.a, end_pc + 1, begin.c)
        else:
            raise CompileError(line_no, f"unknown statement {head!r}")
    if open_loops:
        raise CompileError(open_loops[-1][0], "LOOP without END")
    emit(Instr(Opcode.HALT))
    program = emit.program
    verify(program)
    return serialize(program)


def disassemble(program: Program) -> str:
    lines = []
    for pc, ins in enumerate(program.instrs):
        name = Opcode(ins.op).name
        lines.append(f"{pc:4d}  {name:<11} {ins.a} {ins.b} {ins.c}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Interpreter
# ---------------------------------------------------------------------------


def _value_size(value) -> int:
    return len(value) if isinstance(value, bytes) else 8


class FirmwareVM:
    """Executes verified bytecode as a medium process.

    ``execute`` is a generator yielding radio commands; the medium drives
    it on the shared virtual clock. The generator's return value is the
    final REPORT register. Sandbox violations raise :class:`FirmwareTrap`.
    """

    def __init__(self, program: Program, port: RadioPort, channel: int = 0,
                 budget: int = DEFAULT_BUDGET):
        self.program = program
        self.port = port
        self.channel = channel
        self.power_dbm = port.radio.tx_power_dbm
        self.rx_data = b""
        self.rx_count = 0
        self.occupancy = 0
        self.report = None
        self.budget = budget
        self.event_log: list[tuple[int, str]] = []
        self.stack: list[int | bytes] = []
        self.trap: FirmwareTrap | None = None

    def _log(self, message: str) -> None:
        self.event_log.append((self.port.now(), message))

    def _trap(self, kind: str, detail: str, pc: int):
        trap = FirmwareTrap(kind, detail, pc)
        self.trap = trap
        self._log(f"trap {kind}: {detail}")
        return trap

    def _charge(self, pc: int, amount: int = 1) -> None:
        self.budget -= amount
        if self.budget < 0:
            raise self._trap("budget", "instruction budget exhausted", pc)

    def _check_memory(self, pc: int) -> None:
        used = sum(_value_size(v) for v in self.stack)
        used += _value_size(self.rx_data)
        if self.report is not None:
            used += _value_size(self.report)
        if used > MEMORY_LIMIT:
            raise self._trap("memory", f"{used} bytes of live values", pc)

    def _check_channel(self, pc: int) -> None:
        if not self.port.check_channel(self.channel):
            raise self._trap("channel", f"channel {self.channel} not in plan", pc)

    def _push(self, value, pc: int) -> None:
        if len(self.stack) >= STACK_LIMIT:
            raise self._trap("stack", "operand stack overflow", pc)
        self.stack.append(value)
        self._check_memory(pc)

    def _pop(self, pc: int):
        if not self.stack:
            raise self._trap("stack", "operand stack underflow", pc)
        return self.stack.pop()

    def _binop(self, op: Opcode, pc: int) -> None:
        right = self._pop(pc)
        left = self._pop(pc)
        if op == Opcode.EQ:
            self._push(int(type(left) is type(right) and left == right), pc)
            return
        if op == Opcode.ADD and isinstance(left, bytes) and isinstance(right, bytes):
            self._push(left + right, pc)
            return
        if not (isinstance(left, int) and isinstance(right, int)):
            raise self._trap("type", f"{Opcode(op).name} on {type(left).__name__} "
                                     f"and {type(right).__name__}", pc)
        if op == Opcode.ADD:
            self._push(left + right, pc)
        elif op == Opcode.SUB:
            self._push(left - right, pc)
        elif op == Opcode.MUL:
            self._push(left * right, pc)
        elif op == Opcode.DIV:
            if right == 0:
                raise self._trap("div-zero", "division by zero", pc)
            self._push(left // right, pc)

    def execute(self):
        instrs = self.program.instrs
        consts = self.program.consts
        loop_stack: list[list[int]] = []  # mutable [begin_pc, remaining]
        pc = 0
        self._log(f"start channel={self.channel} budget={self.budget}")
        while True:
            ins = instrs[pc]
            op = Opcode(ins.op)
            self._charge(pc)
            if op == Opcode.HALT:
                self._log("halt")
                return self.report
            if op == Opcode.PUSH_INT:
                self._push(ins.a, pc)
            elif op == Opcode.PUSH_CONST:
                self._push(consts[ins.a], pc)
            elif op == Opcode.LOAD:
                value = (self.rx_data, self.rx_count, self.occupancy)[ins.a]
                self._push(value, pc)
            elif op in _BINOPS:
                self._binop(op, pc)
            elif op == Opcode.REPORT:
                self.report = self._pop(pc)
                self._check_memory(pc)
                self._log(f"report {self.report!r}")
            elif op == Opcode.SET_CHANNEL:
                self.channel = ins.a
                self._check_channel(pc)
                self._log(f"channel={self.channel}")
            elif op == Opcode.SET_POWER:
                self.power_dbm = self.port.clamp_power(float(ins.a))
                self._log(f"power={self.power_dbm:g}dBm")
            elif op == Opcode.TX:
                self._check_channel(pc)
                payload = consts[ins.a]
                base = self.port.now()
                for i in range(ins.b):
                    if i:
                        self._charge(pc)
                        start = base + i * ins.c * MS
                        if start > self.port.now():
                            yield WaitCmd(start)
                    tx = yield TxCmd(self.port, self.channel, self.power_dbm, payload)
                    self._log(f"tx channel={self.channel} bytes={len(payload)}")
                    yield WaitCmd(tx.end_us)
            elif op == Opcode.RX:
                self._check_channel(pc)
                data = yield RxCmd(self.port, self.channel, ins.a * MS)
                if data is None:
                    self.rx_data = b""
                    self._log("rx timeout")
                else:
                    self.rx_data = data
                    self.rx_count += 1
                    self._log(f"rx ok bytes={len(data)}")
                self._check_memory(pc)
            elif op == Opcode.SENSE:
                self._check_channel(pc)
                occupancy = yield SenseCmd(self.port, self.channel, ins.a * MS)
                self.occupancy = round(occupancy * 100)
                self._log(f"sense occupancy={self.occupancy}%")
            elif op == Opcode.LOOP_BEGIN:
                if len(loop_stack) >= LOOP_DEPTH_LIMIT:
                    raise self._trap("loop", "loop nesting too deep", pc)
                if ins.a == 0:
                    pc = ins.b
                    continue
                loop_stack.append([pc, ins.a])
            elif op == Opcode.LOOP_END:
                frame = loop_stack[-1]
                frame[1] -= 1
                if frame[1] > 0:
                    pc = frame[0] + 1
                    continue
                loop_stack.pop()
            pc += 1


def run(bytecode: bytes, port: RadioPort, channel: int = 0,
        budget: int = DEFAULT_BUDGET) -> FirmwareVM:
    """Deserialize, verify and wrap bytecode in a ready-to-run VM."""
    vm = FirmwareVM(load(bytecode), port, channel=channel, budget=budget)
    return vm
