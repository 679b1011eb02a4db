"""edgebus: a miniature partitioned commit-log pub-sub stack for edge crowd-sensing.

The pieces, bottom up:

* ``record`` / ``commitlog``  -- CRC-framed records in segmented, retention-bounded
  per-partition logs.
* ``topics``                  -- topic registry and the deterministic key router.
* ``wire``                    -- length-prefixed binary frames shared by clients and peers.
* ``replication`` / ``broker``-- leader/follower replication with in-sync-replica commit
  tracking, heartbeat failure detection, and deterministic failover.
* ``client``                  -- broker client (event-driven core plus a blocking facade).
* ``gateway``                 -- HTTP ingress/egress for mobile producers and consumers,
  with device-id pseudonymization.
* ``tsstore`` / ``sink``      -- wide-row time-series store and the draining consumer.
* ``sim``                     -- deterministic virtual-time harness running the real
  components over a simulated device -> edge -> cloud topology.
* ``cli``                     -- the ``edgebus`` command suite.
"""

__version__ = "0.1.0"
