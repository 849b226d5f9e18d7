# integration tests - real database, no full app setup
