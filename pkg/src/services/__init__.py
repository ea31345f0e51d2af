"""Services for LeakGuard."""
