"""Data models for LeakGuard."""
