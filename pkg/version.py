VERSION = "2.0.0"
LAST_UPDATED = "2026/10/19"
