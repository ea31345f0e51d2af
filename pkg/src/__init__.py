"""LeakGuard - content leakage control for style-consistent image generation."""
