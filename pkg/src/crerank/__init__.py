"""Two-stage session recommender with candidate rank embeddings."""
