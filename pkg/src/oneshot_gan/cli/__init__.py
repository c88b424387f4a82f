"""Command-line surface: config, ingestion and the ``oneshot-gan`` entry point."""
