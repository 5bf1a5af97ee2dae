"""Plain-text dump/parse for ConicProgram, one declaration per line.

The format exists for diffing desk instances and feeding the solve command;
it is not a wire protocol.  Layout:

    # comment / blank lines ignored
    var <name> lb=<float> ub=<float> bin=<0|1>
    const <float>
    lin <var> <coef>
    quad <var> <coef>
    eq <tag> | <coef> <var> ... | <rhs>
    le <tag> | <coef> <var> ... | <rhs>
    ge <tag> | <coef> <var> ... | <rhs>
    soc <tag> | <const> <coef> <var> ... ; <entry> ; ...
    rsoc <tag> | <entry> ; <entry> ; ...

Floats are written with repr() so a dump/parse/dump cycle is byte-identical.
Names and tags may not contain whitespace, '|' or ';'.
"""

from __future__ import annotations

import math
from typing import List

from .program import INF, Affine, ConicProgram, ProgramError

_BANNER = "# gridmarket program v1"


def _check_token(kind: str, token: str) -> str:
    if not token or any(ch.isspace() for ch in token) or "|" in token \
            or ";" in token:
        raise ProgramError(f"{kind} {token!r} not dumpable: contains "
                           "whitespace, '|' or ';'")
    return token


def _fmt(x: float) -> str:
    if x == INF:
        return "inf"
    if x == -INF:
        return "-inf"
    return repr(float(x))


def _coeff_part(coeffs) -> str:
    return " ".join(f"{_fmt(c)} {v}" for v, c in coeffs.items())


def _entry_part(entry: Affine) -> str:
    s = _fmt(entry.const)
    if entry.coeffs:
        s += " " + _coeff_part(entry.coeffs)
    return s


def dump_program(program: ConicProgram) -> str:
    lines: List[str] = [_BANNER]
    for name, var in program.variables.items():
        _check_token("variable", name)
        lines.append(f"var {name} lb={_fmt(var.lb)} ub={_fmt(var.ub)} "
                     f"bin={1 if var.binary else 0}")
    if program.obj_const:
        lines.append(f"const {_fmt(program.obj_const)}")
    for v, c in program.obj_linear.items():
        lines.append(f"lin {v} {_fmt(c)}")
    for v, c in program.obj_quad.items():
        lines.append(f"quad {v} {_fmt(c)}")
    for row in program.rows:
        _check_token("tag", row.tag)
        lines.append(f"{row.sense} {row.tag} | {_coeff_part(row.coeffs)} "
                     f"| {_fmt(row.rhs)}")
    for cone in program.cones:
        _check_token("tag", cone.tag)
        entries = " ; ".join(_entry_part(e) for e in cone.entries)
        lines.append(f"{cone.kind} {cone.tag} | {entries}")
    return "\n".join(lines) + "\n"


def _parse_float(tok: str, where: str) -> float:
    try:
        if tok == "inf":
            return INF
        if tok == "-inf":
            return -INF
        return float(tok)
    except ValueError:
        raise ProgramError(f"{where}: bad number {tok!r}") from None


def _parse_pairs(tokens: List[str], where: str) -> dict:
    if len(tokens) % 2:
        raise ProgramError(f"{where}: expected coef/name pairs")
    out = {}
    for i in range(0, len(tokens), 2):
        out[tokens[i + 1]] = out.get(tokens[i + 1], 0.0) \
            + _parse_float(tokens[i], where)
    return out


def parse_program(text: str) -> ConicProgram:
    prog = ConicProgram()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        where = f"line {lineno}"
        head, _, rest = line.partition(" ")
        if head == "var":
            toks = rest.split()
            if len(toks) != 4:
                raise ProgramError(f"{where}: malformed var line")
            name = toks[0]
            try:
                kw = dict(t.split("=", 1) for t in toks[1:])
                lb, ub, is_bin = kw["lb"], kw["ub"], kw["bin"]
            except (ValueError, KeyError):
                raise ProgramError(f"{where}: malformed var line") from None
            prog.add_var(name, lb=_parse_float(lb, where),
                         ub=_parse_float(ub, where),
                         binary=is_bin == "1")
        elif head == "const":
            prog.obj_const += _parse_float(rest.strip(), where)
        elif head in ("lin", "quad"):
            toks = rest.split()
            if len(toks) != 2:
                raise ProgramError(f"{where}: malformed {head} line")
            if head == "lin":
                prog.add_obj(toks[0], _parse_float(toks[1], where))
            else:
                prog.add_obj_quad(toks[0], _parse_float(toks[1], where))
        elif head in ("eq", "le", "ge"):
            parts = [p.strip() for p in rest.split("|")]
            if len(parts) != 3:
                raise ProgramError(f"{where}: expected 'tag | terms | rhs'")
            tag, terms, rhs = parts
            coeffs = _parse_pairs(terms.split(), where)
            getattr(prog, f"add_{head}")(tag, coeffs,
                                         _parse_float(rhs, where))
        elif head in ("soc", "rsoc"):
            parts = [p.strip() for p in rest.split("|")]
            if len(parts) != 2:
                raise ProgramError(f"{where}: expected 'tag | entries'")
            tag, body = parts
            entries = []
            for chunk in body.split(";"):
                toks = chunk.split()
                if not toks:
                    raise ProgramError(f"{where}: empty cone entry")
                entries.append(Affine(_parse_pairs(toks[1:], where),
                                      _parse_float(toks[0], where)))
            getattr(prog, f"add_{head}")(tag, entries)
        else:
            raise ProgramError(f"{where}: unknown directive {head!r}")
    return prog


def save_program(program: ConicProgram, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_program(program))


def load_program(path) -> ConicProgram:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_program(fh.read())
