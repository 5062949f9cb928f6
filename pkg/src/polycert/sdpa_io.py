"""SDPA sparse-format text I/O.

The format describes the pair
    (P) min c'x  s.t.  X = sum_i x_i F_i - F_0 >= 0
    (D) max <F_0, Y>  s.t.  <F_i, Y> = c_i,  Y >= 0.

Our native problem (min <C,X> s.t. <A_i,X> = b_i, X >= 0) sits on the (D)
side: we write F_i = A_i, c_i = b_i, F_0 = -C, so an external solver's (P)
optimum equals the negated native optimum.  Free scalars, which the format
lacks, are written as a difference of two nonnegative diagonal entries in a
dedicated diagonal block (u = u+ - u-).

Layout written:
    line 1: m (number of constraint matrices)
    line 2: number of blocks
    line 3: block sizes, negative for diagonal blocks
    line 4: the c vector (our b)
    then one entry per line: matno blkno i j value   (1-based, i <= j)
Comment lines starting with '"' or '*' are accepted when reading.
"""

from __future__ import annotations

import numpy as np

from .sdp import SdpProblem, SdpProblemBuilder


def write_sdpa(prob: SdpProblem) -> str:
    m = prob.m
    sizes = [d.size for d in prob.psd_data]
    blocks = [str(n) for n in sizes]
    nfree = prob.nfree
    if nfree:
        blocks.append(str(-2 * nfree))
    lines = [
        '"exported problem: native primal written as the SDPA dual',
        f"{m}",
        f"{len(blocks)}",
        " ".join(blocks),
        " ".join(repr(float(v)) for v in prob.b),
    ]

    def emit(mat, blk, i, j, v):
        if v != 0.0:
            lines.append(f"{mat} {blk} {i + 1} {j + 1} {v!r}")

    # F_0 = -C
    for bi, d in enumerate(prob.psd_data):
        n = d.size
        for r in range(n):
            for c in range(r, n):
                emit(0, bi + 1, r, c, -float(d.C[r, c]))
    if nfree:
        fb = len(sizes) + 1
        for j in range(nfree):
            qj = float(prob.q[j])
            emit(0, fb, j, j, -qj)
            emit(0, fb, nfree + j, nfree + j, qj)
    # F_i = A_i
    for bi, d in enumerate(prob.psd_data):
        for t in range(d.vv.shape[0]):
            con = int(np.searchsorted(d.cptr, t, side="right")) - 1
            emit(con + 1, bi + 1, int(d.rr[t]), int(d.cc[t]), float(d.vv[t]))
    if nfree:
        fb = len(sizes) + 1
        B = prob.Bfree.tocoo()
        order = np.lexsort((B.col, B.row))
        for k in order:
            i, j, v = int(B.row[k]), int(B.col[k]), float(B.data[k])
            emit(i + 1, fb, j, j, v)
            emit(i + 1, fb, nfree + j, nfree + j, -v)
    return "\n".join(lines) + "\n"


def read_sdpa(text: str) -> SdpProblem:
    """Parse SDPA sparse text back into a native problem (C = -F_0).

    Diagonal blocks come back as PSD blocks carrying only diagonal entries,
    which is optimum-equivalent; free-variable splits are not re-fused.
    """
    body = []
    for line in text.splitlines():
        s = line.strip()
        if not s or s[0] in '"*':
            continue
        body.append(s.replace(",", " ").replace("{", " ").replace("}", " ")
                    .replace("(", " ").replace(")", " "))
    tokens = " ".join(body).split()
    pos = 0

    def take(n):
        nonlocal pos
        out = tokens[pos:pos + n]
        pos += n
        return out

    m = int(float(take(1)[0]))
    nblocks = int(float(take(1)[0]))
    raw_sizes = [int(float(t)) for t in take(nblocks)]
    b = [float(t) for t in take(m)]

    bld = SdpProblemBuilder()
    blk_ids = []
    for s in raw_sizes:
        blk_ids.append(bld.add_psd_block(abs(s)))
    cons = [bld.add_constraint(bi) for bi in b]

    while pos + 5 <= len(tokens):
        matno, blkno, i, j, v = take(5)
        matno, blkno = int(float(matno)), int(float(blkno))
        i, j, v = int(float(i)) - 1, int(float(j)) - 1, float(v)
        blk = blk_ids[blkno - 1]
        if matno == 0:
            bld.add_psd_obj(blk, i, j, -v)   # C = -F_0
        else:
            bld.add_psd_entry(cons[matno - 1], blk, i, j, v)
    return bld.build()
