from costmap_racer.main import app

app()
