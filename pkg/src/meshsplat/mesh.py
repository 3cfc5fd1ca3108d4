"""Triangle mesh container, file IO and mesh smoothness energies.

The mesh topology (faces, adjacency, cotangent weights) is frozen at load
time; only vertex positions move during optimization, so per-face normals
and areas are the only derived quantities that get refreshed.
"""

from __future__ import annotations

import os

import numpy as np

DEGENERATE_AREA = 1e-12
COTAN_CLAMP = (1e-3, 1e3)


class MeshError(Exception):
    """Raised on malformed mesh files or degenerate geometry."""


class TriangleMesh:
    """Triangle mesh with cached topology and refreshable geometry.

    Attributes
    ----------
    vertices : (V, 3) float64 positions in meters.
    faces : (F, 3) int64 vertex indices.
    face_normals : (F, 3) unit normals (winding order (v2-v1) x (v3-v1)).
    face_areas : (F,) areas in m^2.
    skin_weights : (V, B) convex blend weights, or None.
    """

    def __init__(self, vertices, faces, skin_weights=None):
        vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        faces = np.ascontiguousarray(faces, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise MeshError("vertices must be (V, 3)")
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise MeshError("faces must be (F, 3)")
        if faces.size and (faces.min() < 0 or faces.max() >= len(vertices)):
            bad = int(np.argmax((faces < 0) | (faces >= len(vertices))) // 3)
            raise MeshError(f"face {bad} references a vertex out of range")
        repeated = (
            (faces[:, 0] == faces[:, 1])
            | (faces[:, 1] == faces[:, 2])
            | (faces[:, 0] == faces[:, 2])
        )
        if repeated.any():
            raise MeshError(f"face {int(np.argmax(repeated))} repeats a vertex")

        self.vertices = vertices
        self.faces = faces
        self.face_normals = np.zeros((len(faces), 3))
        self.face_areas = np.zeros(len(faces))
        self.refresh_geometry()
        if (self.face_areas <= DEGENERATE_AREA).any():
            bad = int(np.argmax(self.face_areas <= DEGENERATE_AREA))
            raise MeshError(f"face {bad} is degenerate (area <= {DEGENERATE_AREA})")

        self._build_topology()
        self._cotan_weights = self._compute_cotan_weights()

        self.skin_weights = None
        if skin_weights is not None:
            self.set_skin_weights(skin_weights)

    # ------------------------------------------------------------------ #
    # geometry

    def refresh_geometry(self):
        """Recompute face normals and areas from current vertices."""
        v = self.vertices
        f = self.faces
        e1 = v[f[:, 1]] - v[f[:, 0]]
        e2 = v[f[:, 2]] - v[f[:, 0]]
        cr = np.cross(e1, e2)
        nrm = np.linalg.norm(cr, axis=1)
        self.face_areas = 0.5 * nrm
        with np.errstate(invalid="ignore", divide="ignore"):
            self.face_normals = cr / np.maximum(nrm, 1e-300)[:, None]

    def set_vertices(self, vertices):
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        self.refresh_geometry()

    def face_normal(self, f):
        """Unit normal of face f, following stored vertex winding."""
        n = self.face_normals[f]
        assert np.linalg.norm(n) > 0.5, f"degenerate face {f}"
        return n

    # ------------------------------------------------------------------ #
    # topology

    def _build_topology(self):
        V, F = len(self.vertices), len(self.faces)
        self.vertex_face_adjacency = [[] for _ in range(V)]
        for fi, face in enumerate(self.faces):
            for vi in face:
                self.vertex_face_adjacency[vi].append(fi)

        adj_sets = [set() for _ in range(F)]
        for vi in range(V):
            inc = self.vertex_face_adjacency[vi]
            for a in inc:
                adj_sets[a].update(inc)
        for fi in range(F):
            adj_sets[fi].discard(fi)
        self._face_adjacency = adj_sets

        # padded array form for vectorized walking
        max_deg = max((len(s) for s in adj_sets), default=0)
        self.adj_faces = np.full((F, max_deg), -1, dtype=np.int64)
        self.adj_counts = np.zeros(F, dtype=np.int64)
        for fi, s in enumerate(adj_sets):
            ids = sorted(s)
            self.adj_faces[fi, : len(ids)] = ids
            self.adj_counts[fi] = len(ids)

        # undirected edges and the two faces flanking each edge
        edge_faces = {}
        for fi, (a, b, c) in enumerate(self.faces):
            for u, w in ((a, b), (b, c), (c, a)):
                key = (min(u, w), max(u, w))
                edge_faces.setdefault(key, []).append(fi)
        self.edges = np.array(sorted(edge_faces.keys()), dtype=np.int64).reshape(-1, 2)
        pairs = []
        for key in map(tuple, self.edges):
            fs = edge_faces[key]
            for i in range(len(fs)):
                for j in range(i + 1, len(fs)):
                    pairs.append((fs[i], fs[j]))
        self.edge_face_pairs = np.array(sorted(set(pairs)), dtype=np.int64).reshape(-1, 2)
        self._edge_faces = edge_faces

        # per-vertex neighbor CSR for the Laplacian
        nbr = [[] for _ in range(V)]
        for (u, w) in self.edges:
            nbr[u].append(w)
            nbr[w].append(u)
        counts = np.array([len(n) for n in nbr], dtype=np.int64)
        self.nbr_ptr = np.concatenate([[0], np.cumsum(counts)])
        self.nbr_idx = np.array(
            [j for n in nbr for j in sorted(n)], dtype=np.int64
        )

    def adjacency_set(self, f):
        """Faces sharing at least one vertex with f (f itself excluded)."""
        return set(self._face_adjacency[f])

    def _compute_cotan_weights(self):
        """Clamped cotangent weight per undirected edge, rest geometry."""
        v = self.vertices
        w = {}
        for key, fs in self._edge_faces.items():
            i, j = key
            cots = []
            for fi in fs:
                face = self.faces[fi]
                k = [x for x in face if x != i and x != j]
                if len(k) != 1:
                    continue
                k = k[0]
                e1 = v[i] - v[k]
                e2 = v[j] - v[k]
                cross = np.linalg.norm(np.cross(e1, e2))
                cots.append(float(np.dot(e1, e2)) / max(cross, 1e-300))
            wij = 0.5 * sum(cots) if cots else 1.0
            w[key] = float(np.clip(wij, COTAN_CLAMP[0], COTAN_CLAMP[1]))
        # CSR-aligned weights matching nbr_idx ordering
        weights = np.zeros(len(self.nbr_idx))
        for i in range(len(self.vertices)):
            lo, hi = self.nbr_ptr[i], self.nbr_ptr[i + 1]
            for p in range(lo, hi):
                j = self.nbr_idx[p]
                weights[p] = w[(min(i, j), max(i, j))]
        return weights

    @property
    def cotan_weights(self):
        return self._cotan_weights

    def set_skin_weights(self, skin_weights):
        sw = np.ascontiguousarray(skin_weights, dtype=np.float64)
        if sw.shape[0] != len(self.vertices):
            raise MeshError("skin weight rows must match vertex count")
        if (sw < -1e-9).any():
            raise MeshError("skin weights must be nonnegative")
        sums = sw.sum(axis=1)
        if np.abs(sums - 1.0).max() > 1e-6:
            bad = int(np.argmax(np.abs(sums - 1.0)))
            raise MeshError(f"skin weights of vertex {bad} do not sum to 1")
        self.skin_weights = sw

    # ------------------------------------------------------------------ #
    # smoothness energies

    def laplacian_loss(self):
        """Cotangent-weighted mean-value Laplacian energy and its gradient.

        L = sum_i || sum_j w_ij (v_j - v_i) / sum_j w_ij ||^2.
        Weights are the rest-pose cotangents, held constant.
        Returns (loss, grad) with grad shaped like vertices.
        """
        v = self.vertices
        V = len(v)
        w = self._cotan_weights
        Wsum = np.zeros(V)
        np.add.at(Wsum, np.repeat(np.arange(V), np.diff(self.nbr_ptr)), w)
        rows = np.repeat(np.arange(V), np.diff(self.nbr_ptr))
        diff = v[self.nbr_idx] - v[rows]
        contrib = w[:, None] * diff
        d = np.zeros((V, 3))
        np.add.at(d, rows, contrib)
        safe = np.maximum(Wsum, 1e-300)
        d /= safe[:, None]
        loss = float(np.sum(d * d))

        grad = -2.0 * d
        # each neighbor j of i receives 2 * (w_ij / W_i) * d_i
        scale = (w / safe[rows])[:, None]
        np.add.at(grad, self.nbr_idx, 2.0 * scale * d[rows])
        return loss, grad

    def normal_smoothness_loss(self):
        """Mean cosine distance between edge-adjacent face normals + gradient."""
        pairs = self.edge_face_pairs
        if len(pairs) == 0:
            return 0.0, np.zeros_like(self.vertices)
        v = self.vertices
        f = self.faces
        e1 = v[f[:, 1]] - v[f[:, 0]]
        e2 = v[f[:, 2]] - v[f[:, 0]]
        cr = np.cross(e1, e2)
        nrm = np.linalg.norm(cr, axis=1)
        n = cr / nrm[:, None]

        fa, fb = pairs[:, 0], pairs[:, 1]
        loss = float(np.mean(1.0 - np.sum(n[fa] * n[fb], axis=1)))

        # d loss / d n_f for each face, accumulated over its pairs
        dn = np.zeros_like(n)
        coeff = -1.0 / len(pairs)
        np.add.at(dn, fa, coeff * n[fb])
        np.add.at(dn, fb, coeff * n[fa])

        # through the normalization: d cr = (I - n n^T) dn / |cr|
        dcr = (dn - n * np.sum(dn * n, axis=1)[:, None]) / nrm[:, None]
        # cr = e1 x e2 : adjoints e1 += e2 x dcr ; e2 += dcr x e1
        de1 = np.cross(e2, dcr)
        de2 = np.cross(dcr, e1)
        grad = np.zeros_like(v)
        np.add.at(grad, f[:, 0], -(de1 + de2))
        np.add.at(grad, f[:, 1], de1)
        np.add.at(grad, f[:, 2], de2)
        return loss, grad


# ---------------------------------------------------------------------- #
# file IO


def load_mesh(path, weights_path=None):
    """Load an OBJ or PLY mesh, optionally with a skin-weight sidecar.

    If weights_path is None, looks for '<stem>.weights.txt' next to the
    mesh and loads it when present.
    """
    ext = os.path.splitext(path)[1].lower()
    if ext == ".obj":
        vertices, faces = _read_obj(path)
    elif ext == ".ply":
        vertices, faces = _read_ply(path)
    else:
        raise MeshError(f"unsupported mesh format: {ext}")

    if weights_path is None:
        cand = os.path.splitext(path)[0] + ".weights.txt"
        weights_path = cand if os.path.exists(cand) else None
    sw = read_skin_weights(weights_path) if weights_path else None
    return TriangleMesh(vertices, faces, skin_weights=sw)


def _read_obj(path):
    vertices = []
    faces = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise MeshError(f"{path}:{lineno}: malformed vertex")
                vertices.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                if len(parts) != 4:
                    raise MeshError(
                        f"{path}:{lineno}: only triangle faces supported"
                    )
                idx = []
                for tok in parts[1:]:
                    try:
                        idx.append(int(tok.split("/")[0]) - 1)
                    except ValueError as exc:
                        raise MeshError(f"{path}:{lineno}: bad index {tok!r}") from exc
                faces.append(idx)
    if not vertices:
        raise MeshError(f"{path}: no vertices")
    return np.array(vertices), np.array(faces, dtype=np.int64).reshape(-1, 3)


def save_obj(path, vertices, faces):
    with open(path, "w") as fh:
        for v in vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for f in faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def _read_ply(path):
    """Binary little-endian PLY with float vertex xyz and int face lists."""
    with open(path, "rb") as fh:
        header = []
        while True:
            line = fh.readline()
            if not line:
                raise MeshError(f"{path}: truncated PLY header")
            header.append(line.decode("ascii", "replace").strip())
            if header[-1] == "end_header":
                break
        if header[0] != "ply":
            raise MeshError(f"{path}: not a PLY file")
        fmt = [h for h in header if h.startswith("format")]
        if not fmt or "binary_little_endian" not in fmt[0]:
            raise MeshError(f"{path}: only binary little-endian PLY supported")

        n_vert = n_face = 0
        vert_props = []
        cur = None
        for h in header:
            parts = h.split()
            if parts[0] == "element":
                cur = parts[1]
                if cur == "vertex":
                    n_vert = int(parts[2])
                elif cur == "face":
                    n_face = int(parts[2])
            elif parts[0] == "property" and cur == "vertex":
                vert_props.append((parts[1], parts[2]))

        type_map = {
            "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
            "uchar": "u1", "uint8": "u1", "char": "i1", "int8": "i1",
            "short": "<i2", "ushort": "<u2", "int": "<i4", "int32": "<i4",
            "uint": "<u4", "uint32": "<u4",
        }
        vdtype = np.dtype([(name, type_map[t]) for t, name in vert_props])
        vdata = np.frombuffer(fh.read(vdtype.itemsize * n_vert), dtype=vdtype)
        if len(vdata) != n_vert:
            raise MeshError(f"{path}: truncated vertex data")
        vertices = np.stack(
            [vdata["x"], vdata["y"], vdata["z"]], axis=1
        ).astype(np.float64)

        faces = np.empty((n_face, 3), dtype=np.int64)
        for i in range(n_face):
            cnt = np.frombuffer(fh.read(1), dtype=np.uint8)[0]
            if cnt != 3:
                raise MeshError(f"{path}: face {i} has {cnt} vertices (need 3)")
            faces[i] = np.frombuffer(fh.read(12), dtype="<i4")
    return vertices, faces


def save_ply(path, vertices, faces):
    with open(path, "wb") as fh:
        fh.write(b"ply\nformat binary_little_endian 1.0\n")
        fh.write(f"element vertex {len(vertices)}\n".encode())
        fh.write(b"property float x\nproperty float y\nproperty float z\n")
        fh.write(f"element face {len(faces)}\n".encode())
        fh.write(b"property list uchar int vertex_indices\nend_header\n")
        fh.write(np.asarray(vertices, dtype="<f4").tobytes())
        for f in faces:
            fh.write(np.uint8(3).tobytes())
            fh.write(np.asarray(f, dtype="<i4").tobytes())


def read_skin_weights(path):
    """ASCII sidecar: line 1 is the bone count B, then B floats per vertex."""
    with open(path) as fh:
        first = fh.readline().split()
        if len(first) != 1:
            raise MeshError(f"{path}: first line must declare the bone count")
        B = int(first[0])
        rows = []
        for lineno, line in enumerate(fh, 2):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != B:
                raise MeshError(f"{path}:{lineno}: expected {B} weights")
            rows.append([float(x) for x in parts])
    return np.array(rows)


def save_skin_weights(path, weights):
    weights = np.asarray(weights)
    with open(path, "w") as fh:
        fh.write(f"{weights.shape[1]}\n")
        for row in weights:
            fh.write(" ".join(f"{x:.9g}" for x in row) + "\n")


def auto_skin_weights(vertices, bone_segments, power=4.0, eps=1e-6):
    """Inverse-distance weights to bone segments, renormalized to convex.

    bone_segments: (B, 2, 3) array of segment endpoints in canonical space.
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    segs = np.asarray(bone_segments, dtype=np.float64)
    B = len(segs)
    d = np.empty((len(vertices), B))
    for b in range(B):
        a, c = segs[b]
        ab = c - a
        denom = max(float(ab @ ab), 1e-300)
        t = np.clip((vertices - a) @ ab / denom, 0.0, 1.0)
        closest = a + t[:, None] * ab
        d[:, b] = np.linalg.norm(vertices - closest, axis=1)
    w = 1.0 / (d + eps) ** power
    return w / w.sum(axis=1, keepdims=True)
