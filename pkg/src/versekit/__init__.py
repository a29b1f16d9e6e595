"""Multi-agent hybrid scenario verification."""
