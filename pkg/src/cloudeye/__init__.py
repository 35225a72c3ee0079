"""Edge-cloud video analytics at desk scale."""
