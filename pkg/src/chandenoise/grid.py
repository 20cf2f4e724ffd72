"""OFDM resource grid construction and QAM (de)modulation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Base seed for the DM-RS pseudo-random QPSK sequences. Pilot values depend
# only on (slot, symbol index), never on the data RNG, so the receiver can
# regenerate them.
_DMRS_SEQ_SEED = 0x5EED

_QPSK_POINTS = np.array([1 + 1j, 1 - 1j, -1 + 1j, -1 - 1j]) / np.sqrt(2)


class GridConfigError(ValueError):
    """Raised when a GridConfig violates its invariants."""


def _gray_constellation(order: int) -> np.ndarray:
    """Gray-coded constellation for `order`-QAM, unit average power.

    Bits map MSB-first to the constellation index; the first half of the
    bits select the I axis, the second half the Q axis, each via the Gray
    sequence 00,01,11,10 -> -3,-1,+1,+3 (scaled).
    """
    if order == 4:
        # (±1 ± j)/sqrt(2); index bits (b0 b1) -> (I sign, Q sign)
        return np.array([1 + 1j, 1 - 1j, -1 + 1j, -1 - 1j]) / np.sqrt(2)
    if order == 16:
        gray_axis = np.array([-3, -1, +3, +1], dtype=float)  # Gray order on 2 bits
        i = np.repeat(gray_axis, 4)
        q = np.tile(gray_axis, 4)
        return (i + 1j * q) / np.sqrt(10)
    raise GridConfigError(f"unsupported QAM order {order} (supported: 4, 16)")


@dataclass(frozen=True)
class GridConfig:
    """Static layout of the simulated time-frequency grid."""

    n_subcarriers: int = 64
    n_ofdm: int = 14
    n_slots_total: int = 8
    n_slots_train: int = 3
    n_tx: int = 2
    n_rx: int = 4
    delta_f: float = 15e3
    constellation: int = 4
    dmrs_symbol_indices: tuple[int, ...] = (2, 11)
    dmrs_comb_stride: int = 2

    def __post_init__(self):
        if self.n_subcarriers < 1:
            raise GridConfigError("n_subcarriers must be >= 1")
        if self.n_slots_train >= self.n_slots_total - self.n_slots_train:
            raise GridConfigError(
                "fine-tuning period must be shorter than the inference period "
                f"(n_slots_train={self.n_slots_train}, n_slots_total={self.n_slots_total})"
            )
        if any(s < 0 or s >= self.n_ofdm for s in self.dmrs_symbol_indices):
            raise GridConfigError("DM-RS symbol index out of range")
        if self.n_subcarriers % self.dmrs_comb_stride != 0:
            raise GridConfigError("comb stride must divide the subcarrier count")
        if self.n_tx > self.dmrs_comb_stride:
            raise GridConfigError("each tx port needs its own comb offset (n_tx <= stride)")
        _gray_constellation(self.constellation)

    @property
    def n_symbols_total(self) -> int:
        return self.n_slots_total * self.n_ofdm

    @property
    def bits_per_symbol(self) -> int:
        return int(np.log2(self.constellation))

    @property
    def symbol_duration(self) -> float:
        """OFDM symbol duration incl. cyclic prefix: slot time / symbols per slot.

        A slot lasts 1 ms at 15 kHz subcarrier spacing and shrinks
        proportionally for wider spacings (5G NR numerology).
        """
        slot_duration = 1e-3 * (15e3 / self.delta_f)
        return slot_duration / self.n_ofdm


@dataclass
class ResourceGrid:
    """One built grid: pilot layout plus transmitted symbols and bits.

    tx_symbols[n, k, :] is the transmit vector at RE (n, k). On pilot REs
    only the active comb port (k mod stride) transmits; the other ports are
    zero, which models the FDM port separation of comb-type DM-RS.
    """

    cfg: GridConfig
    pilot_mask: np.ndarray          # bool (n_symbols_total, K)
    active_port: np.ndarray         # int (n_symbols_total, K); -1 off pilot REs
    tx_symbols: np.ndarray          # complex (n_symbols_total, K, n_tx)
    tx_bits: np.ndarray             # int8 (n_symbols_total, K, n_tx, bits_per_symbol)
    _pilot_index_set: frozenset = field(default=None, repr=False)
    _data_index_set: frozenset = field(default=None, repr=False)

    @property
    def data_mask(self) -> np.ndarray:
        return ~self.pilot_mask

    @property
    def pilot_index_set(self) -> frozenset:
        if self._pilot_index_set is None:
            ns, ks = np.nonzero(self.pilot_mask)
            self._pilot_index_set = frozenset(zip(ns.tolist(), ks.tolist()))
        return self._pilot_index_set

    @property
    def data_index_set(self) -> frozenset:
        if self._data_index_set is None:
            ns, ks = np.nonzero(self.data_mask)
            self._data_index_set = frozenset(zip(ns.tolist(), ks.tolist()))
        return self._data_index_set

    def dmrs_symbol_times(self) -> np.ndarray:
        """Absolute OFDM-symbol indices that carry DM-RS, over all slots."""
        offs = np.asarray(self.cfg.dmrs_symbol_indices)
        slots = np.arange(self.cfg.n_slots_total) * self.cfg.n_ofdm
        return np.sort((slots[:, None] + offs[None, :]).ravel())


def dmrs_sequence(slot: int, symbol: int, n: int) -> np.ndarray:
    """Known unit-modulus QPSK pilot sequence for one (slot, symbol)."""
    rng = np.random.default_rng((_DMRS_SEQ_SEED, slot, symbol))
    return _QPSK_POINTS[rng.integers(0, 4, size=n)]


def build_grid(cfg: GridConfig, rng: np.random.Generator) -> ResourceGrid:
    """Place comb-type DM-RS and random QAM data symbols over all slots."""
    n_sym, k = cfg.n_symbols_total, cfg.n_subcarriers
    stride = cfg.dmrs_comb_stride

    pilot_mask = np.zeros((n_sym, k), dtype=bool)
    active_port = np.full((n_sym, k), -1, dtype=np.int64)
    tx = np.zeros((n_sym, k, cfg.n_tx), dtype=np.complex128)
    bits = np.zeros((n_sym, k, cfg.n_tx, cfg.bits_per_symbol), dtype=np.int8)

    comb = np.arange(k) % stride
    for slot in range(cfg.n_slots_total):
        for sym in cfg.dmrs_symbol_indices:
            n = slot * cfg.n_ofdm + sym
            on = comb < cfg.n_tx  # comb offsets without a port stay data REs
            pilot_mask[n, on] = True
            active_port[n, on] = comb[on]
            seq = dmrs_sequence(slot, sym, k)
            for port in range(cfg.n_tx):
                sel = comb == port
                tx[n, sel, port] = seq[sel]

    data_n, data_k = np.nonzero(~pilot_mask)
    n_data = data_n.size
    raw = rng.integers(0, 2, size=(n_data, cfg.n_tx, cfg.bits_per_symbol)).astype(np.int8)
    syms = qam_modulate(raw.reshape(-1, cfg.bits_per_symbol).ravel(), cfg.constellation)
    tx[data_n, data_k] = syms.reshape(n_data, cfg.n_tx)
    bits[data_n, data_k] = raw

    return ResourceGrid(cfg=cfg, pilot_mask=pilot_mask, active_port=active_port,
                        tx_symbols=tx, tx_bits=bits)


def qam_modulate(bits: np.ndarray, order: int) -> np.ndarray:
    """Map a flat bit sequence to Gray-coded unit-power QAM symbols."""
    const = _gray_constellation(order)
    m = int(np.log2(order))
    bits = np.asarray(bits).ravel()
    if bits.size % m != 0:
        raise ValueError(f"bit count {bits.size} not divisible by {m}")
    groups = bits.reshape(-1, m)
    idx = groups @ (1 << np.arange(m - 1, -1, -1))
    return const[idx]


def qam_demodulate_hard(estimates: np.ndarray, order: int) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-point slicing; ties go to the lowest constellation index.

    Returns (bits, hard_symbols) with bits shaped (n_estimates, log2(order)).
    """
    const = _gray_constellation(order)
    est = np.asarray(estimates).ravel()
    d2 = np.abs(est[:, None] - const[None, :]) ** 2
    idx = np.argmin(d2, axis=1)  # argmin returns the first (lowest) index on ties
    m = int(np.log2(order))
    bits = ((idx[:, None] >> np.arange(m - 1, -1, -1)) & 1).astype(np.int8)
    return bits, const[idx]
