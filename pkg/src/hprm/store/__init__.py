"""Shared-memory object store.

A small daemon owns a directory of memory-backed files and arbitrates
their lifecycle (create, seal, get, release, evict); clients map the
files directly, so object bytes cross process boundaries without ever
being copied through a socket.
"""

from hprm.store.client import (
    ID_BYTES,
    ObjectRef,
    SealedObject,
    StoreClient,
    StoreError,
    StoreTimeout,
    WritableObject,
    random_object_id,
)
from hprm.store.daemon import StoreDaemon
from hprm.store.state import Status, StoreCounters, StoreState

__all__ = [
    "ID_BYTES",
    "ObjectRef",
    "SealedObject",
    "StoreClient",
    "StoreDaemon",
    "StoreError",
    "StoreTimeout",
    "Status",
    "StoreCounters",
    "StoreState",
    "WritableObject",
    "random_object_id",
]
