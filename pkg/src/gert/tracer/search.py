"""Path search kernels: per-transmitter image tree with beam apertures, then a
per-receiver pass that validates reflection chains and single-edge diffraction.

The tree builder is shared code in the numba subset.  Receiver validation has
two implementations: the loop kernel below and a vectorized numpy twin
(:func:`trace_receivers_numpy`) that emits the same paths in the same order.
"""

from __future__ import annotations

import numpy as np

from .._jit import njit
from .accel import (SEGMENT_TRIM_M, AccelStructure, brute_force_blocked, segment_blocked)

KIND_LOS = 0
KIND_REFLECTION = 1
KIND_DIFFRACTION = 2

IMAGE_EPS = 1e-9  # metres; image must be strictly in front of the next facet
CLIP_TOL = 1e-7  # metres; apertures are kept slightly generous
DEGENERATE_EDGE2 = 1e-18  # squared metres
INSIDE_TOL = 1e-9  # metres; point-in-facet slack
MAX_TREE_NODES = 20_000_000


# -- small vector helpers ---------------------------------------------------------------

@njit
def _dot(a, b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


@njit
def _grow2(arr, cap):
    out = np.empty((cap, arr.shape[1]), dtype=arr.dtype)
    out[:arr.shape[0]] = arr
    return out


@njit
def _grow1(arr, cap):
    out = np.empty(cap, dtype=arr.dtype)
    out[:arr.shape[0]] = arr
    return out


@njit
def _clip(src, ns, dst, nx, ny, nz, c, tol):
    """Sutherland-Hodgman: keep the part of polygon src[:ns] with n.x - c >= -tol."""
    nd = 0
    if ns == 0:
        return 0
    for i in range(ns):
        j = (i + 1) % ns
        a = src[i]
        b = src[j]
        da = nx * a[0] + ny * a[1] + nz * a[2] - c
        db = nx * b[0] + ny * b[1] + nz * b[2] - c
        ina = da >= -tol
        inb = db >= -tol
        if ina:
            dst[nd, 0] = a[0]
            dst[nd, 1] = a[1]
            dst[nd, 2] = a[2]
            nd += 1
        if ina != inb:
            t = da / (da - db)
            dst[nd, 0] = a[0] + t * (b[0] - a[0])
            dst[nd, 1] = a[1] + t * (b[1] - a[1])
            dst[nd, 2] = a[2] + t * (b[2] - a[2])
            nd += 1
    return nd


@njit
def _poly_area2(p, n_pts, normal):
    sx = 0.0
    sy = 0.0
    sz = 0.0
    for i in range(1, n_pts - 1):
        ax, ay, az = p[i, 0] - p[0, 0], p[i, 1] - p[0, 1], p[i, 2] - p[0, 2]
        bx, by, bz = p[i + 1, 0] - p[0, 0], p[i + 1, 1] - p[0, 1], p[i + 1, 2] - p[0, 2]
        sx += ay * bz - az * by
        sy += az * bx - ax * bz
        sz += ax * by - ay * bx
    return sx * normal[0] + sy * normal[1] + sz * normal[2]


@njit
def _side_planes(img, pts, n_pts, out_n, out_c, base):
    """Unit planes through the image and each aperture edge, oriented into the beam."""
    cx = 0.0
    cy = 0.0
    cz = 0.0
    for i in range(n_pts):
        cx += pts[i, 0]
        cy += pts[i, 1]
        cz += pts[i, 2]
    cx /= n_pts
    cy /= n_pts
    cz /= n_pts
    for i in range(n_pts):
        j = (i + 1) % n_pts
        ax, ay, az = pts[i, 0] - img[0], pts[i, 1] - img[1], pts[i, 2] - img[2]
        bx, by, bz = pts[j, 0] - img[0], pts[j, 1] - img[1], pts[j, 2] - img[2]
        mx, my, mz = ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx
        norm = np.sqrt(mx * mx + my * my + mz * mz)
        ex, ey, ez = pts[j, 0] - pts[i, 0], pts[j, 1] - pts[i, 1], pts[j, 2] - pts[i, 2]
        if ex * ex + ey * ey + ez * ez < DEGENERATE_EDGE2:
            # clipping can leave near-duplicate vertices; their plane is meaningless
            mx, my, mz, norm = 0.0, 0.0, 0.0, 0.0
        if norm > 0.0:
            mx /= norm
            my /= norm
            mz /= norm
        if mx * (cx - img[0]) + my * (cy - img[1]) + mz * (cz - img[2]) < 0.0:
            mx, my, mz = -mx, -my, -mz
        out_n[base + i, 0] = mx
        out_n[base + i, 1] = my
        out_n[base + i, 2] = mz
        out_c[base + i] = mx * img[0] + my * img[1] + mz * img[2]


# -- image tree ---------------------------------------------------------------------------

@njit
def build_image_tree(tx, max_order, fac_n, fac_d, hull_ptr, hull_pts, max_poly, max_nodes):
    """Breadth-first image tree; node 0 is the transmitter.

    Each node stores its facet, parent, depth, image point and the aperture
    polygon (the part of its facet the parent beam actually illuminates)
    together with the side planes of the beam leaving that aperture.
    """
    nf = fac_n.shape[0]
    cap = 1024
    facet = np.empty(cap, dtype=np.int64)
    parent = np.empty(cap, dtype=np.int64)
    depth = np.empty(cap, dtype=np.int64)
    image = np.empty((cap, 3))
    ap_ptr = np.empty(cap + 1, dtype=np.int64)
    pcap = 4096
    ap_pts = np.empty((pcap, 3))
    pl_n = np.empty((pcap, 3))
    pl_c = np.empty(pcap)
    facet[0] = -1
    parent[0] = -1
    depth[0] = 0
    image[0, 0] = tx[0]
    image[0, 1] = tx[1]
    image[0, 2] = tx[2]
    ap_ptr[0] = 0
    ap_ptr[1] = 0
    n_nodes = 1
    n_pts = 0
    buf_a = np.empty((max_poly, 3))
    buf_b = np.empty((max_poly, 3))
    head = 0
    while head < n_nodes:
        node = head
        head += 1
        if depth[node] >= max_order:
            continue
        f = facet[node]
        img = image[node].copy()
        s0 = ap_ptr[node]
        s1 = ap_ptr[node + 1]
        for g in range(nf):
            if g == f:
                continue
            sd = _dot(fac_n[g], img) - fac_d[g]
            if sd <= IMAGE_EPS:
                continue
            h0 = hull_ptr[g]
            h1 = hull_ptr[g + 1]
            m = h1 - h0
            if m < 3:
                continue
            for i in range(m):
                buf_a[i] = hull_pts[h0 + i]
            if f >= 0:
                m = _clip(buf_a, m, buf_b, fac_n[f, 0], fac_n[f, 1], fac_n[f, 2],
                          fac_d[f], CLIP_TOL)
                in_b = True
                for k in range(s0, s1):
                    if m < 3:
                        break
                    if in_b:
                        m = _clip(buf_b, m, buf_a, pl_n[k, 0], pl_n[k, 1], pl_n[k, 2], pl_c[k],
                                  CLIP_TOL)
                    else:
                        m = _clip(buf_a, m, buf_b, pl_n[k, 0], pl_n[k, 1], pl_n[k, 2], pl_c[k],
                                  CLIP_TOL)
                    in_b = not in_b
                if m < 3:
                    continue
                if in_b:
                    for i in range(m):
                        buf_a[i] = buf_b[i]
                if _poly_area2(buf_a, m, fac_n[g]) <= 1e-12:
                    continue
            if n_nodes >= max_nodes:
                raise RuntimeError("image tree exceeds the node budget")
            if n_nodes + 1 >= cap:
                cap *= 2
                facet = _grow1(facet, cap)
                parent = _grow1(parent, cap)
                depth = _grow1(depth, cap)
                image = _grow2(image, cap)
                ap_ptr = _grow1(ap_ptr, cap + 1)
            if n_pts + m > pcap:
                while n_pts + m > pcap:
                    pcap *= 2
                ap_pts = _grow2(ap_pts, pcap)
                pl_n = _grow2(pl_n, pcap)
                pl_c = _grow1(pl_c, pcap)
            nn = n_nodes
            facet[nn] = g
            parent[nn] = node
            depth[nn] = depth[node] + 1
            for k in range(3):
                image[nn, k] = img[k] - 2.0 * sd * fac_n[g, k]
            for i in range(m):
                ap_pts[n_pts + i] = buf_a[i]
            _side_planes(image[nn], buf_a, m, pl_n, pl_c, n_pts)
            n_pts += m
            ap_ptr[nn + 1] = n_pts
            n_nodes += 1
    return (facet[:n_nodes].copy(), parent[:n_nodes].copy(), depth[:n_nodes].copy(),
            image[:n_nodes].copy(), ap_ptr[:n_nodes + 1].copy(), ap_pts[:n_pts].copy(),
            pl_n[:n_pts].copy(), pl_c[:n_pts].copy())


# -- receiver kernel --------------------------------------------------------------------------

@njit
def _in_facet(p, f, fac_n, tri_ptr, tri_idx, v0, v1, v2):
    n = fac_n[f]
    for k in range(tri_ptr[f], tri_ptr[f + 1]):
        t = tri_idx[k]
        inside = True
        for e in range(3):
            if e == 0:
                a = v0[t]
                b = v1[t]
            elif e == 1:
                a = v1[t]
                b = v2[t]
            else:
                a = v2[t]
                b = v0[t]
            ex, ey, ez = b[0] - a[0], b[1] - a[1], b[2] - a[2]
            px, py, pz = p[0] - a[0], p[1] - a[1], p[2] - a[2]
            w = n[0] * (ey * pz - ez * py) + n[1] * (ez * px - ex * pz) + n[2] * (ex * py - ey * px)
            if w < -INSIDE_TOL * np.sqrt(ex * ex + ey * ey + ez * ez):
                inside = False
                break
        if inside:
            return True
    return False


@njit
def _emit(n_out, o_rx, o_kind, o_ref, o_pts, rx_i, kind, ref, pts, npts):
    cap = o_rx.shape[0]
    if n_out >= cap:
        cap *= 2
        o_rx = _grow1(o_rx, cap)
        o_kind = _grow1(o_kind, cap)
        o_ref = _grow1(o_ref, cap)
        new = np.zeros((cap, o_pts.shape[1], 3))
        new[:o_pts.shape[0]] = o_pts
        o_pts = new
    o_rx[n_out] = rx_i
    o_kind[n_out] = kind
    o_ref[n_out] = ref
    for i in range(npts):
        o_pts[n_out, i] = pts[i]
    return n_out + 1, o_rx, o_kind, o_ref, o_pts


@njit
def trace_receivers(tx, rxs, n_facets_slots, want_reflections, want_diffraction,
                    node_facet, node_parent, node_depth, node_image, ap_ptr, pl_n, pl_c,
                    fac_n, fac_d, tri_ptr, tri_idx,
                    e_a, e_t, e_len, e_n0, e_nn, e_ut, e_rt, e_txok,
                    v0, v1, v2, node_lo, node_hi, node_left, node_right, node_start,
                    node_count, bvh_tris):
    """All LOS, reflection and diffraction paths from ``tx`` to each receiver.

    Returns flat arrays (rx index, kind, node or edge id, interaction points)
    ordered by receiver, then LOS, reflections in tree order, edges in order.
    """
    cap = 64
    o_rx = np.empty(cap, dtype=np.int64)
    o_kind = np.empty(cap, dtype=np.int64)
    o_ref = np.empty(cap, dtype=np.int64)
    o_pts = np.zeros((cap, n_facets_slots, 3))
    n_out = 0
    pts = np.zeros((n_facets_slots, 3))
    chain = np.zeros((n_facets_slots + 2, 3))
    trim = SEGMENT_TRIM_M
    n_nodes = node_facet.shape[0]
    for r in range(rxs.shape[0]):
        rx = rxs[r]
        if not segment_blocked(tx, rx, trim, v0, v1, v2, node_lo, node_hi, node_left,
                               node_right, node_start, node_count, bvh_tris):
            n_out, o_rx, o_kind, o_ref, o_pts = _emit(n_out, o_rx, o_kind, o_ref, o_pts,
                                                      r, 0, -1, pts, 0)
        if want_reflections:
            for node in range(1, n_nodes):
                f = node_facet[node]
                if _dot(fac_n[f], rx) - fac_d[f] <= IMAGE_EPS:
                    continue
                ok = True
                for k in range(ap_ptr[node], ap_ptr[node + 1]):
                    if _dot(pl_n[k], rx) - pl_c[k] < -CLIP_TOL:
                        ok = False
                        break
                if not ok:
                    continue
                k_depth = node_depth[node]
                tgt = rx.copy()
                cur = node
                for lev in range(k_depth - 1, -1, -1):
                    g = node_facet[cur]
                    img = node_image[cur]
                    st = _dot(fac_n[g], tgt) - fac_d[g]
                    si = _dot(fac_n[g], img) - fac_d[g]
                    if st <= IMAGE_EPS or si >= 0.0:
                        ok = False
                        break
                    t = st / (st - si)
                    for c in range(3):
                        pts[lev, c] = tgt[c] + t * (img[c] - tgt[c])
                    if not _in_facet(pts[lev], g, fac_n, tri_ptr, tri_idx, v0, v1, v2):
                        ok = False
                        break
                    tgt = pts[lev].copy()
                    cur = node_parent[cur]
                if not ok:
                    continue
                chain[0] = tx
                for i in range(k_depth):
                    chain[i + 1] = pts[i]
                chain[k_depth + 1] = rx
                for i in range(k_depth + 1):
                    if segment_blocked(chain[i], chain[i + 1], trim, v0, v1, v2, node_lo,
                                       node_hi, node_left, node_right, node_start, node_count,
                                       bvh_tris):
                        ok = False
                        break
                if ok:
                    n_out, o_rx, o_kind, o_ref, o_pts = _emit(n_out, o_rx, o_kind, o_ref, o_pts,
                                                              r, 1, node, pts, k_depth)
        if want_diffraction:
            for e in range(e_a.shape[0]):
                if not e_txok[e]:
                    continue
                q = rx - e_a[e]
                ur = _dot(q, e_t[e])
                qp = q - ur * e_t[e]
                rr = np.sqrt(_dot(qp, qp))
                rt = e_rt[e]
                if rr < 1e-6 or rt < 1e-6:
                    continue
                s = (e_ut[e] * rr + ur * rt) / (rt + rr)
                if s < 0.0 or s >= e_len[e]:
                    continue
                if not (_dot(qp, e_n0[e]) > 1e-9 or _dot(qp, e_nn[e]) > 1e-9):
                    continue
                for c in range(3):
                    pts[0, c] = e_a[e, c] + s * e_t[e, c]
                if segment_blocked(tx, pts[0], trim, v0, v1, v2, node_lo, node_hi, node_left,
                                   node_right, node_start, node_count, bvh_tris):
                    continue
                if segment_blocked(pts[0], rx, trim, v0, v1, v2, node_lo, node_hi, node_left,
                                   node_right, node_start, node_count, bvh_tris):
                    continue
                n_out, o_rx, o_kind, o_ref, o_pts = _emit(n_out, o_rx, o_kind, o_ref, o_pts,
                                                          r, 2, e, pts, 1)
    return o_rx[:n_out].copy(), o_kind[:n_out].copy(), o_ref[:n_out].copy(), o_pts[:n_out].copy()


# -- per-transmitter precomputation ---------------------------------------------------------

def edge_tx_terms(accel: AccelStructure, tx):
    """Axial/radial transmitter coordinates per edge and whether tx sees its exterior."""
    e = accel.edges
    if len(e) == 0:
        return np.empty(0), np.empty(0), np.empty(0, dtype=bool)
    q = np.asarray(tx, dtype=np.float64)[None] - e.a
    ut = np.einsum("ij,ij->i", q, e.t)
    qp = q - ut[:, None] * e.t
    rt = np.linalg.norm(qp, axis=1)
    ok = (np.einsum("ij,ij->i", qp, e.n0) > 1e-9) | (np.einsum("ij,ij->i", qp, e.nn) > 1e-9)
    return ut, rt, ok


def max_polygon_size(accel: AccelStructure, max_order: int) -> int:
    hp = accel.facets.hull_ptr
    biggest = int(np.max(np.diff(hp))) if len(hp) > 1 else 3
    return 2 * (biggest + 1) * (max_order + 1) + 16


# -- numpy twin -------------------------------------------------------------------------------

def _in_facets_numpy(p, facets_idx, accel):
    """Vectorized point-in-facet for points p (M, 3) against facet ids (M,)."""
    fac = accel.facets
    out = np.zeros(len(p), dtype=bool)
    counts = fac.tri_ptr[facets_idx + 1] - fac.tri_ptr[facets_idx]
    if len(p) == 0:
        return out
    rep = np.repeat(np.arange(len(p)), counts)
    starts = np.repeat(fac.tri_ptr[facets_idx], counts)
    local = np.arange(len(rep)) - np.repeat(np.cumsum(counts) - counts, counts)
    tris = fac.tri_idx[starts + local]
    n = fac.normal[facets_idx][rep]
    pp = p[rep]
    inside = np.ones(len(rep), dtype=bool)
    for a, b in ((accel.v0, accel.v1), (accel.v1, accel.v2), (accel.v2, accel.v0)):
        e = b[tris] - a[tris]
        w = np.einsum("ij,ij->i", n, np.cross(e, pp - a[tris]))
        inside &= w >= -INSIDE_TOL * np.linalg.norm(e, axis=1)
    np.logical_or.at(out, rep, inside)
    return out


def trace_receivers_numpy(tx, rxs, slots, want_reflections, want_diffraction, tree, accel,
                          edge_terms):
    """Vectorized twin of :func:`trace_receivers` (brute-force occlusion)."""
    node_facet, node_parent, node_depth, node_image, ap_ptr, _, pl_n, pl_c = tree
    fac = accel.facets
    tx = np.asarray(tx, dtype=np.float64)
    v0, v1, v2 = accel.v0, accel.v1, accel.v2
    out_rx, out_kind, out_ref, out_pts = [], [], [], []
    n_nodes = len(node_facet)
    nodes = np.arange(1, n_nodes)
    plane_owner = np.repeat(np.arange(n_nodes), np.diff(ap_ptr))
    edges = accel.edges
    ut, rt, txok = edge_terms
    for r, rx in enumerate(np.asarray(rxs, dtype=np.float64)):
        if not brute_force_blocked(v0, v1, v2, tx[None], rx[None])[0]:
            out_rx.append(r)
            out_kind.append(KIND_LOS)
            out_ref.append(-1)
            out_pts.append(np.zeros((slots, 3)))
        if want_reflections and len(nodes):
            f = node_facet[nodes]
            front = fac.normal[f] @ rx - fac.offset[f] > IMAGE_EPS
            viol = pl_n @ rx - pl_c < -CLIP_TOL
            bad = np.zeros(n_nodes, dtype=bool)
            np.logical_or.at(bad, plane_owner, viol)
            cand = nodes[front & ~bad[nodes]]
            depth = node_depth[cand]
            pts = np.zeros((len(cand), slots, 3))
            tgt = np.repeat(rx[None], len(cand), axis=0)
            cur = cand.copy()
            ok = np.ones(len(cand), dtype=bool)
            for step in range(int(depth.max()) if len(cand) else 0):
                lev = depth - 1 - step
                act = ok & (lev >= 0)
                if not act.any():
                    break
                ia = np.nonzero(act)[0]
                g = node_facet[cur[ia]]
                img = node_image[cur[ia]]
                st = np.einsum("ij,ij->i", fac.normal[g], tgt[ia]) - fac.offset[g]
                si = np.einsum("ij,ij->i", fac.normal[g], img) - fac.offset[g]
                good = (st > IMAGE_EPS) & (si < 0.0)
                with np.errstate(divide="ignore", invalid="ignore"):
                    t = st / (st - si)
                p = tgt[ia] + t[:, None] * (img - tgt[ia])
                good &= _in_facets_numpy(np.where(good[:, None], p, 0.0), g, accel)
                ok[ia[~good]] = False
                iw = ia[good]
                pts[iw, lev[iw]] = p[good]
                tgt[iw] = p[good]
                cur[iw] = node_parent[cur[iw]]
            cand, depth, pts = cand[ok], depth[ok], pts[ok]
            if len(cand):
                seg_a, seg_b, owner = [], [], []
                for i, k in enumerate(depth):
                    chain = np.vstack([tx[None], pts[i, :k], rx[None]])
                    seg_a.append(chain[:-1])
                    seg_b.append(chain[1:])
                    owner.append(np.full(k + 1, i))
                blocked = brute_force_blocked(v0, v1, v2, np.concatenate(seg_a), np.concatenate(seg_b))
                hit = np.zeros(len(cand), dtype=bool)
                np.logical_or.at(hit, np.concatenate(owner), blocked)
                for i in np.nonzero(~hit)[0]:
                    out_rx.append(r)
                    out_kind.append(KIND_REFLECTION)
                    out_ref.append(int(cand[i]))
                    out_pts.append(pts[i])
        if want_diffraction and len(edges):
            q = rx[None] - edges.a
            ur = np.einsum("ij,ij->i", q, edges.t)
            qp = q - ur[:, None] * edges.t
            rr = np.linalg.norm(qp, axis=1)
            valid = txok & (rr >= 1e-6) & (rt >= 1e-6)
            with np.errstate(divide="ignore", invalid="ignore"):
                s = (ut * rr + ur * rt) / (rt + rr)
            valid &= (s >= 0.0) & (s < edges.length)
            valid &= (np.einsum("ij,ij->i", qp, edges.n0) > 1e-9) | (np.einsum("ij,ij->i", qp, edges.nn) > 1e-9)
            ev = np.nonzero(valid)[0]
            if len(ev):
                qpt = edges.a[ev] + s[ev, None] * edges.t[ev]
                b1 = brute_force_blocked(v0, v1, v2, np.repeat(tx[None], len(ev), axis=0), qpt)
                b2 = brute_force_blocked(v0, v1, v2, qpt, np.repeat(rx[None], len(ev), axis=0))
                for i in np.nonzero(~(b1 | b2))[0]:
                    p = np.zeros((slots, 3))
                    p[0] = qpt[i]
                    out_rx.append(r)
                    out_kind.append(KIND_DIFFRACTION)
                    out_ref.append(int(ev[i]))
                    out_pts.append(p)
    if not out_rx:
        return (np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64),
                np.empty(0, dtype=np.int64), np.zeros((0, slots, 3)))
    return (np.array(out_rx, dtype=np.int64), np.array(out_kind, dtype=np.int64),
            np.array(out_ref, dtype=np.int64), np.stack(out_pts))
