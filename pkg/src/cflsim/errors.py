"""Exception hierarchy shared across the protocol modules."""


class CFLError(Exception):
    """Base class for every error raised by cflsim."""


class ClusterInfeasible(CFLError):
    """A cluster has no eligible leader (no live server-adjacent target)."""


class RingInfeasible(CFLError):
    """Key-ring size cannot be met with the distinct peers available."""


class NoSharedKey(CFLError):
    pass


class NotVotingMember(CFLError):
    pass


class UnsupportedKeyLength(CFLError):
    pass


class NonceReuse(CFLError):
    """A (key, nonce) pair was presented for encryption twice."""


class AuthFailure(CFLError):
    """Envelope failed authentication (wrong key, tampering or truncation)."""


class StaleTimestamp(CFLError):
    pass


class DimensionMismatch(CFLError, ValueError):
    pass


class WeightMismatch(CFLError, ValueError):
    pass


class RouteInfeasible(CFLError):
    """Live targets are not connected in the routing graph."""


class NotNeighbor(CFLError):
    """Delivery attempted between clients that are not single-hop links."""


class DomainError(CFLError, ValueError):
    pass


class ConfigError(CFLError, ValueError):
    pass
