"""Spin-bath generation on the diamond lattice and bath file I/O.

Coordinate convention: the z-axis of every reported position is the
crystal [111] direction.  Lattice sites are generated in conventional
cubic axes (where the box-extent argument is interpreted) and rotated
once by :data:`R111` before being returned; all downstream angular maps
depend on this single fixed rotation.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import constants
from .couplings import require_symmetric
from .errors import BathFileError, ValidationError

# gamma (rad ms^-1 G^-1), spin quantum number
ISOTOPES = {
    "13C": (constants.GAMMA_13C, 0.5),
    "14N": (constants.GAMMA_14N, 1.0),
    "15N": (constants.GAMMA_15N, 0.5),
    "1H": (constants.GAMMA_1H, 0.5),
}

# rows are the [111]-frame axes expressed in conventional cubic coordinates:
# x_new = [1,1,-2]/sqrt(6), y_new = [-1,1,0]/sqrt(2), z_new = [1,1,1]/sqrt(3)
R111 = np.array([
    [1.0, 1.0, -2.0],
    [-1.0, 1.0, 0.0],
    [1.0, 1.0, 1.0],
])
R111 = R111 / np.linalg.norm(R111, axis=1)[:, None]

_DIAMOND_BASIS = np.array([
    [0.00, 0.00, 0.00],
    [0.00, 0.50, 0.50],
    [0.50, 0.00, 0.50],
    [0.50, 0.50, 0.00],
    [0.25, 0.25, 0.25],
    [0.25, 0.75, 0.75],
    [0.75, 0.25, 0.75],
    [0.75, 0.75, 0.25],
])


@dataclass(frozen=True)
class BathSpin:
    """One nuclear spin: isotope, position (nm), gamma (rad/ms/G), spin
    quantum number, optional hyperfine and quadrupole tensors (MHz)."""

    isotope: str
    position: np.ndarray
    gamma: float
    spin: float
    hyperfine: np.ndarray | None = None
    quadrupole: np.ndarray | None = None

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=float).reshape(3)
        if not np.all(np.isfinite(pos)):
            raise ValidationError(f"non-finite position for {self.isotope}")
        object.__setattr__(self, "position", pos)
        if self.spin <= 0:
            raise ValidationError("spin quantum number must be positive")
        if round(2 * self.spin) != 2 * self.spin:
            raise ValidationError(f"spin {self.spin} is not half-integer")
        if self.hyperfine is not None:
            object.__setattr__(
                self, "hyperfine",
                require_symmetric(self.hyperfine, "hyperfine tensor"))
        if self.quadrupole is not None:
            if self.spin < 1:
                raise ValidationError("quadrupole tensor requires spin >= 1")
            object.__setattr__(
                self, "quadrupole",
                require_symmetric(self.quadrupole, "quadrupole tensor"))

    @property
    def dim(self):
        return int(round(2 * self.spin)) + 1


def make_spin(isotope, position, hyperfine=None, quadrupole=None):
    """BathSpin with gamma and spin looked up from the isotope registry."""
    try:
        gamma, spin = ISOTOPES[isotope]
    except KeyError:
        raise ValidationError(f"unknown isotope {isotope!r}") from None
    return BathSpin(isotope, np.asarray(position, dtype=float), gamma, spin,
                    hyperfine, quadrupole)


@dataclass(frozen=True)
class ExclusionInfo:
    positions: np.ndarray
    cutoff: float
    removed: int


@dataclass(frozen=True)
class BathConfiguration:
    """Immutable set of bath spins plus its generation provenance."""

    spins: tuple
    seed: int | None = None
    abundance: float | None = None
    lattice_extent: np.ndarray | None = None
    exclusion: ExclusionInfo | None = None

    def __post_init__(self):
        object.__setattr__(self, "spins", tuple(self.spins))
        pos = self.positions
        if len(pos) > 1:
            # duplicate positions break the dipolar couplings downstream
            order = np.lexsort(pos.T)
            diffs = np.diff(pos[order], axis=0)
            if np.any(np.all(diffs == 0, axis=1)):
                raise ValidationError("bath contains duplicate positions")

    @property
    def positions(self):
        if not self.spins:
            return np.zeros((0, 3))
        return np.array([s.position for s in self.spins])

    def __len__(self):
        return len(self.spins)

    def subset(self, indices):
        return replace(self, spins=tuple(self.spins[i] for i in indices))


def generate_lattice(extent, lattice_constant=constants.DIAMOND_LATTICE_CONSTANT_NM):
    """All diamond-lattice sites inside an axis-aligned box.

    The box is centered at the origin with side lengths ``extent`` (nm)
    along the conventional cubic axes and is half-open, ``[-e/2, e/2)``,
    so stacked boxes tile without double counting; a one-lattice-constant
    box therefore contains exactly the 8 atoms of the conventional cell.
    Returned coordinates are rotated into the [111] frame.
    """
    extent = np.asarray(extent, dtype=float).reshape(3)
    if np.any(extent <= 0):
        raise ValidationError(f"extent must be positive, got {extent}")
    if lattice_constant <= 0:
        raise ValidationError("lattice constant must be positive")

    ncells = np.ceil(extent / (2 * lattice_constant)).astype(int) + 1
    rng = [np.arange(-n, n + 1) for n in ncells]
    cells = np.stack(np.meshgrid(*rng, indexing="ij"), axis=-1).reshape(-1, 3)
    sites = (cells[:, None, :] + _DIAMOND_BASIS[None, :, :]).reshape(-1, 3)
    sites *= lattice_constant
    inside = np.all((sites >= -extent / 2) & (sites < extent / 2), axis=1)
    sites = sites[inside]
    # stable deterministic order before rotation
    sites = sites[np.lexsort(sites.T)]
    return sites @ R111.T


def sample_isotopes(sites, abundance, seed, isotope="13C"):
    """Occupy lattice sites independently with the given abundance.

    Deterministic for a fixed (sites, abundance, seed) triple.
    """
    if not 0 <= abundance <= 1:
        raise ValidationError(f"abundance must lie in [0, 1], got {abundance}")
    sites = np.asarray(sites, dtype=float)
    rng = np.random.default_rng(seed)
    mask = rng.random(len(sites)) < abundance
    spins = tuple(make_spin(isotope, pos) for pos in sites[mask])
    return BathConfiguration(spins=spins, seed=seed, abundance=abundance)


def apply_exclusion(config, fixed_spins, cutoff):
    """Carve out a region around fixed spins and append them to the bath.

    Every randomly placed spin within ``cutoff`` (nm) of any fixed
    position is removed; the count of removed spins is recorded on the
    returned configuration's ``exclusion`` field.
    """
    if cutoff < 0:
        raise ValidationError("cutoff must be non-negative")
    fixed = list(fixed_spins)
    if fixed and not isinstance(fixed[0], BathSpin):
        fixed = [make_spin("13C", pos) for pos in np.atleast_2d(fixed_spins)]
    fixed_pos = np.array([s.position for s in fixed]).reshape(-1, 3)

    kept = []
    removed = 0
    for spin in config.spins:
        if fixed_pos.size and cutoff > 0:
            d = np.linalg.norm(fixed_pos - spin.position, axis=1)
            if d.min() < cutoff:
                removed += 1
                continue
        elif fixed_pos.size:
            if np.any(np.all(fixed_pos == spin.position, axis=1)):
                removed += 1
                continue
        kept.append(spin)

    info = ExclusionInfo(fixed_pos, float(cutoff), removed)
    return replace(config, spins=tuple(kept) + tuple(fixed), exclusion=info)


def _format_spin(spin):
    fields = [spin.isotope] + [f"{x:.17g}" for x in spin.position]
    if spin.hyperfine is not None or spin.quadrupole is not None:
        tensor = spin.hyperfine if spin.hyperfine is not None else np.zeros((3, 3))
        fields += [f"{x:.17g}" for x in tensor.reshape(9)]
    if spin.quadrupole is not None:
        fields += [f"{x:.17g}" for x in spin.quadrupole.reshape(9)]
    return " ".join(fields)


def save_bath(config, path):
    """Write a bath file: ``isotope x y z [A(9)] [Q(9)]`` per line."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# spinbath bath file: isotope x y z [Axx..Azz] [Qxx..Qzz]\n")
        fh.write("# positions nm, tensors MHz\n")
        if config.seed is not None:
            fh.write(f"# seed {config.seed}\n")
        for spin in config.spins:
            fh.write(_format_spin(spin) + "\n")


def load_bath(path):
    """Parse a bath file; malformed lines raise with their line number."""
    spins = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tokens = line.split()
            if len(tokens) not in (4, 13, 22):
                raise BathFileError(
                    f"expected 4, 13 or 22 fields, got {len(tokens)}",
                    line=lineno)
            isotope = tokens[0]
            if isotope not in ISOTOPES:
                raise BathFileError(f"unknown isotope {isotope!r}", line=lineno)
            try:
                nums = [float(t) for t in tokens[1:]]
            except ValueError as exc:
                raise BathFileError(str(exc), line=lineno) from None
            hyperfine = quadrupole = None
            if len(nums) >= 12:
                hyperfine = np.array(nums[3:12]).reshape(3, 3)
            if len(nums) == 21:
                quadrupole = np.array(nums[12:21]).reshape(3, 3)
            try:
                spins.append(make_spin(isotope, nums[:3], hyperfine, quadrupole))
            except ValidationError as exc:
                raise BathFileError(str(exc), line=lineno) from None
    return BathConfiguration(spins=tuple(spins))


@dataclass(frozen=True)
class ElectronSpec:
    """Electron spin of the defect center."""

    spin: float = 1.0
    gamma: float = constants.GAMMA_ELECTRON
    d_mhz: float = constants.NV_ZERO_FIELD_SPLITTING_MHZ
    hyperfine_to_central: np.ndarray = field(
        default_factory=lambda: np.zeros((3, 3)))

    def __post_init__(self):
        if self.d_mhz < 0:
            raise ValidationError("zero-field splitting must be >= 0")
        object.__setattr__(
            self, "hyperfine_to_central",
            require_symmetric(self.hyperfine_to_central,
                              "central hyperfine tensor"))

    @property
    def dim(self):
        return int(round(2 * self.spin)) + 1


ELECTRON_STATES = ("ms0", "msM1", "msP1", "pulsed")


@dataclass(frozen=True)
class CentralSystem:
    """The qubit nucleus, an optional electron spin, and the static field.

    ``field`` is in G; ``electron_state`` selects which diabatic manifold
    hosts the qubit levels ('pulsed' starts in ms0 and lets the sequence
    drive the electron).
    """

    central_nucleus: BathSpin
    electron: ElectronSpec | None = None
    field: np.ndarray = field(default_factory=lambda: np.zeros(3))
    electron_state: str = "ms0"

    def __post_init__(self):
        object.__setattr__(self, "field",
                           np.asarray(self.field, dtype=float).reshape(3))
        if self.electron_state not in ELECTRON_STATES:
            raise ValidationError(
                f"electron_state must be one of {ELECTRON_STATES}")
        if self.electron is None and self.electron_state != "ms0":
            raise ValidationError(
                "without an electron the state must be ms0-equivalent")

    @property
    def dims(self):
        """Subsystem dimensions, electron first when present."""
        if self.electron is None:
            return (self.central_nucleus.dim,)
        return (self.electron.dim, self.central_nucleus.dim)

    @property
    def dim(self):
        return int(np.prod(self.dims))
