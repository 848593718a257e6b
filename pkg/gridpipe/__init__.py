"""gridpipe: monitoring-event messaging toolkit (queue, STOMP forwarding, Nagios bridge, supervision)."""

__version__ = "0.4.0"
