"""Exception hierarchy shared by all rdmaflow modules."""


class RdmaFlowError(Exception):
    """Base class for every error raised by this package."""


# --- memory ---------------------------------------------------------------

class ZeroLength(RdmaFlowError):
    """Allocation or transfer of zero bytes where at least one is required."""


class OutOfMemory(RdmaFlowError):
    """Memory space capacity or region table exhausted."""


class ArenaExhausted(RdmaFlowError):
    """No free arena block large enough for the request."""


class OutOfBounds(RdmaFlowError):
    """Byte range escapes its handle or memory space."""


# --- fabric ---------------------------------------------------------------

class FabricError(RdmaFlowError):
    """Base class for simulated-verbs failures."""


class PeerUnreachable(FabricError):
    """No listening device at the requested endpoint."""


class NotRegistered(FabricError):
    """Local buffer used with a verb is not in a registered region."""


class BadToken(FabricError):
    """Remote access token does not match the target region."""


class RemoteOutOfBounds(FabricError):
    """Remote range is not contained in a single registered region."""


class InvalidLength(FabricError):
    """Zero-length verbs are rejected."""


class RecvBufferTooSmall(FabricError):
    """Posted receive buffer cannot hold the incoming message."""


class NoPostedReceive(FabricError):
    """Send found no matching posted receive within the retry bound."""


class Timeout(FabricError):
    """Blocking fabric operation exceeded its deadline."""


class HandlerMissing(FabricError):
    """RPC call to a device without a registered handler."""


# --- wire formats ---------------------------------------------------------

class WireError(RdmaFlowError):
    """Base class for encode/decode failures."""


class RankZero(WireError):
    """Tensor metadata requires rank >= 1."""


class RankMismatch(WireError):
    """Decoded rank differs from the fixed per-edge rank."""


class BadElemType(WireError):
    """Unknown element-type code."""


class LengthMismatch(WireError):
    """Encoded lengths are internally inconsistent."""


# --- graph ----------------------------------------------------------------

class GraphError(RdmaFlowError):
    """Base class for graph construction and analysis failures."""


class ShapeMismatch(GraphError):
    """Shape inference found conflicting dimensions."""


class MissingAnnotation(GraphError):
    """Input node lacks a shape annotation."""


class InvalidConfig(GraphError):
    """Workload or session parameters are unusable."""


# --- allocation-site tracing ------------------------------------------------

class UnknownAddress(RdmaFlowError):
    """A transferred buffer address was never recorded by the tracer."""


# --- runtime protocols ------------------------------------------------------

class ProtocolError(RdmaFlowError):
    """Base class for transfer-protocol violations at runtime."""


class Deadlock(ProtocolError):
    """Scheduler watchdog detected no progress."""


class SizeMismatch(ProtocolError):
    """Tensor size disagrees with the statically planned region."""


class RankChanged(ProtocolError):
    """Tensor rank changed on an edge with fixed-rank metadata."""


class ReassemblyGap(ProtocolError):
    """A message fragment went missing during reassembly."""


# --- bench configuration ----------------------------------------------------

class ConfigError(RdmaFlowError):
    """Base class for scenario-config failures (CLI exit code 2)."""


class UnknownKey(ConfigError):
    """Config contains a key the parser does not know."""


class BadValue(ConfigError):
    """Config value failed validation."""
