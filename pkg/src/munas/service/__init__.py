"""HTTP service wrapping the search engine."""
